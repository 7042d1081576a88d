#include "treediff/tree_model.hpp"

namespace treediff {

TreeDims TreeDims::from_config(const ExperimentConfig& c) {
  TreeDims d;
  d.channels = c.dataset.channels;
  d.height = c.dataset.resolution;
  d.width = c.dataset.resolution;
  d.latent_dim = c.tree.latent_dim();
  d.bottom_up_dim = c.tree.bottom_up_dim();
  d.hidden_width = c.tree.hidden_width;
  d.node_width = c.tree.node_width;
  d.max_depth = c.tree.max_depth;
  d.max_leaves = c.tree.max_leaves;
  d.sigma_floor = c.tree.sigma_floor;
  d.likelihood = c.dataset.channels == 1 ? Likelihood::Bernoulli : Likelihood::Gaussian;
  return d;
}

nlohmann::json TreeDims::to_json() const {
  return {{"channels", channels},
          {"height", height},
          {"width", width},
          {"latent_dim", latent_dim},
          {"bottom_up_dim", bottom_up_dim},
          {"hidden_width", hidden_width},
          {"node_width", node_width},
          {"max_depth", max_depth},
          {"max_leaves", max_leaves},
          {"sigma_floor", sigma_floor},
          {"likelihood", likelihood == Likelihood::Bernoulli ? "bernoulli" : "gaussian"}};
}

TreeDims TreeDims::from_json(const nlohmann::json& j) {
  TreeDims d;
  d.channels = j.at("channels").get<int>();
  d.height = j.at("height").get<int>();
  d.width = j.at("width").get<int>();
  d.latent_dim = j.at("latent_dim").get<int>();
  d.bottom_up_dim = j.at("bottom_up_dim").get<int>();
  d.hidden_width = j.at("hidden_width").get<int>();
  d.node_width = j.at("node_width").get<int>();
  d.max_depth = j.at("max_depth").get<int>();
  d.max_leaves = j.at("max_leaves").get<int>();
  d.sigma_floor = j.at("sigma_floor").get<double>();
  const auto lik = j.at("likelihood").get<std::string>();
  if (lik != "bernoulli" && lik != "gaussian") throw IntegrityError("unknown likelihood '" + lik + "'");
  d.likelihood = lik == "bernoulli" ? Likelihood::Bernoulli : Likelihood::Gaussian;
  return d;
}

}  // namespace treediff
