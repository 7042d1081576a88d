#include "treediff/treevae_train.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

namespace treediff {

void check_finite(const ElboTerms& e) {
  const std::pair<const char*, double> terms[] = {
      {"rec", e.rec}, {"kl_root", e.kl_root}, {"kl_nodes", e.kl_nodes}, {"kl_decisions", e.kl_decisions}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ELBO term ") + name);
}

ScheduleResult run_full_schedule(const ExperimentConfig& config, const Eigen::MatrixXf& data, Rng& rng,
                                 const ScheduleLog& log) {
  const auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const TreeVaeConfig& tc = config.treevae;
  ScheduleResult res;
  Rng init_rng = rng.split(1);
  res.model = TreeModel<float>::init_root_tree(TreeDims::from_config(config), init_rng);
  TreeModel<float>& m = res.model;
  const auto all = [](const std::string&) { return true; };
  int epoch = 0;
  const auto run = [&](const PhaseSpec& spec) {
    if (spec.epochs <= 0) return;
    auto h = train_phase(m, data, spec, tc, rng, epoch);
    epoch += spec.epochs;
    if (!h.empty()) {
      std::ostringstream os;
      os << spec.name << " done at epoch " << epoch << ": elbo " << std::fixed << std::setprecision(3)
         << h.back().terms.total;
      say(os.str());
    }
    res.history.insert(res.history.end(), h.begin(), h.end());
  };

  run({"initial", tc.initial_epochs, all});
  Rng grow_rng = rng.split(2);
  while (static_cast<int>(m.topology.leaves().size()) < m.dims.max_leaves) {
    std::map<int, double> counts = assignment_counts(m, data);
    std::map<int, double> candidates;
    for (const auto& [leaf, c] : counts)
      if (m.topology.node(leaf).depth < m.dims.max_depth) candidates[leaf] = c;
    if (candidates.empty()) break;
    const GrowResult g = grow(m, candidates, grow_rng);
    m.topology.validate(m.dims.max_leaves);
    res.growth.push_back({g.split_leaf, g.left, g.right, epoch, counts});
    say("split leaf " + std::to_string(g.split_leaf) + " into " + std::to_string(g.left) + ", " +
        std::to_string(g.right));
    const auto prefixes = g.trainable_prefixes;
    run({"smalltree", tc.smalltree_epochs, [prefixes](const std::string& name) {
           for (const auto& p : prefixes)
             if (name.rfind(p, 0) == 0) return true;
           return false;
         }});
    run({"intermediate", tc.intermediate_epochs, all});
  }

  const auto masses = assignment_counts(m, data);
  res.pruned = prune(m, masses, static_cast<double>(data.rows()), config.tree.prune_threshold).removed_leaves;
  for (int leaf : res.pruned) say("pruned leaf " + std::to_string(leaf));
  run({"finetune", tc.finetune_epochs, all});
  m.set_trainable(all);
  return res;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,phase,rec,kl_root,kl_nodes,kl_decisions,total\n";
  out << std::setprecision(9);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.phase << ',' << r.terms.rec << ',' << r.terms.kl_root << ',' << r.terms.kl_nodes << ','
        << r.terms.kl_decisions << ',' << r.terms.total << '\n';
  }
}

void write_growth_log(const std::filesystem::path& path, const std::vector<GrowthEvent>& growth) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& g : growth) {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [leaf, c] : g.counts) counts[std::to_string(leaf)] = c;
    out << nlohmann::json{{"epoch", g.epoch}, {"split_leaf", g.split_leaf}, {"left", g.left}, {"right", g.right},
                          {"counts", counts}}
               .dump()
        << '\n';
  }
}

}  // namespace treediff
