#include "treediff/checkpoint.hpp"

#include <zlib.h>

#include <fstream>
#include <sstream>

#include "treediff/config.hpp"

namespace treediff {

namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint16_t kVersion = 20;
constexpr std::uint16_t kDosDate = 0x21;  // 1980-01-01
constexpr size_t kLocalHeader = 30;
constexpr size_t kCentralHeader = 46;
constexpr size_t kEndRecord = 22;
const char kManifestName[] = "manifest.json";

void put16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& b, size_t pos) : bytes_(b), pos_(pos) {}
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | bytes_[pos_ + static_cast<size_t>(i)];
    pos_ += 4;
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > bytes_.size()) throw IntegrityError("checkpoint archive truncated");
  }
  const std::vector<unsigned char>& bytes_;
  size_t pos_;
};

void expect(bool ok, const char* what) {
  if (!ok) throw IntegrityError(std::string("checkpoint archive corrupt: ") + what);
}

std::uint32_t crc_of(const std::vector<unsigned char>& data) {
  return static_cast<std::uint32_t>(::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

std::vector<unsigned char> encode_npy(const NamedArray& a) {
  std::string dict = "{'descr': '" + a.dtype + "', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < a.shape.size(); ++i) {
    if (i > 0) dict += ", ";
    dict += std::to_string(a.shape[i]);
  }
  if (a.shape.size() == 1) dict += ",";
  dict += "), }";
  size_t total = 10 + dict.size() + 1;
  const size_t pad = (64 - total % 64) % 64;
  dict.append(pad, ' ');
  dict += '\n';
  std::vector<unsigned char> out = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  put16(out, static_cast<std::uint16_t>(dict.size()));
  out.insert(out.end(), dict.begin(), dict.end());
  out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

size_t dtype_size(const std::string& d) {
  if (d == "<f4") return 4;
  if (d == "<f8" || d == "<i8") return 8;
  throw IntegrityError("unsupported array dtype " + d);
}

NamedArray decode_npy(const std::vector<unsigned char>& b) {
  expect(b.size() >= 10, "npy too short");
  const unsigned char magic[] = {0x93, 'N', 'U', 'M', 'P', 'Y', 1, 0};
  expect(std::equal(magic, magic + 8, b.begin()), "npy magic");
  const size_t hlen = static_cast<size_t>(b[8] | (b[9] << 8));
  expect(10 + hlen <= b.size(), "npy header length");
  const std::string header(b.begin() + 10, b.begin() + 10 + static_cast<std::ptrdiff_t>(hlen));
  NamedArray a;
  const std::string descr_key = "{'descr': '";
  expect(header.rfind(descr_key, 0) == 0, "npy descr");
  const size_t dend = header.find('\'', descr_key.size());
  expect(dend != std::string::npos, "npy descr");
  a.dtype = header.substr(descr_key.size(), dend - descr_key.size());
  const std::string mid = "', 'fortran_order': False, 'shape': (";
  expect(header.compare(dend, mid.size(), mid) == 0, "npy fortran_order");
  size_t p = dend + mid.size();
  const size_t close = header.find(')', p);
  expect(close != std::string::npos, "npy shape");
  std::stringstream ss(header.substr(p, close - p));
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.find_first_not_of(' ') == std::string::npos) continue;
    try {
      size_t used = 0;
      const long long v = std::stoll(tok, &used);
      expect(v >= 0, "npy shape");
      a.shape.push_back(v);
    } catch (const std::logic_error&) {
      throw IntegrityError("checkpoint archive corrupt: npy shape");
    }
  }
  // Everything after the shape tuple is fixed text plus space padding.
  std::string rest = header.substr(close);
  expect(rest.rfind("), }", 0) == 0, "npy header tail");
  expect(rest.back() == '\n', "npy header newline");
  for (size_t i = 4; i + 1 < rest.size(); ++i) expect(rest[i] == ' ', "npy header padding");
  expect(encode_npy(NamedArray{a.shape, a.dtype, {}}).size() == 10 + hlen, "npy header canonical form");
  size_t count = 1;
  for (auto d : a.shape) count *= static_cast<size_t>(d);
  expect(b.size() - 10 - hlen == count * dtype_size(a.dtype), "npy payload size");
  a.data.assign(b.begin() + 10 + static_cast<std::ptrdiff_t>(hlen), b.end());
  return a;
}

nlohmann::json manifest_json(const Manifest& m) {
  return {{"stage", m.stage},
          {"config_hash", hex_hash(m.config_hash)},
          {"step", m.step},
          {"rng_state", m.rng_state},
          {"extra", m.extra}};
}

Manifest manifest_from_json(const nlohmann::json& j) {
  Manifest m;
  m.stage = j.at("stage").get<std::string>();
  m.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
  m.step = j.at("step").get<std::uint64_t>();
  m.rng_state = j.at("rng_state").get<std::string>();
  m.extra = j.at("extra");
  return m;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::vector<unsigned char>>> members;
  const std::string manifest = manifest_json(ckpt.manifest).dump(2);
  members.emplace_back(kManifestName, std::vector<unsigned char>(manifest.begin(), manifest.end()));
  for (const auto& [name, arr] : ckpt.arrays) members.emplace_back(name + ".npy", encode_npy(arr));

  std::vector<unsigned char> out;
  std::vector<unsigned char> central;
  for (const auto& [name, data] : members) {
    const std::uint32_t offset = static_cast<std::uint32_t>(out.size());
    const std::uint32_t crc = crc_of(data);
    const auto size = static_cast<std::uint32_t>(data.size());
    const auto nlen = static_cast<std::uint16_t>(name.size());
    put32(out, kLocalSig);
    put16(out, kVersion);
    put16(out, 0);
    put16(out, 0);
    put16(out, 0);
    put16(out, kDosDate);
    put32(out, crc);
    put32(out, size);
    put32(out, size);
    put16(out, nlen);
    put16(out, 0);
    out.insert(out.end(), name.begin(), name.end());
    out.insert(out.end(), data.begin(), data.end());

    put32(central, kCentralSig);
    put16(central, kVersion);
    put16(central, kVersion);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, kDosDate);
    put32(central, crc);
    put32(central, size);
    put32(central, size);
    put16(central, nlen);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put16(central, 0);
    put32(central, 0);
    put32(central, offset);
    central.insert(central.end(), name.begin(), name.end());
  }
  const auto cd_offset = static_cast<std::uint32_t>(out.size());
  out.insert(out.end(), central.begin(), central.end());
  put32(out, kEndSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, static_cast<std::uint16_t>(members.size()));
  put16(out, static_cast<std::uint16_t>(members.size()));
  put32(out, static_cast<std::uint32_t>(central.size()));
  put32(out, cd_offset);
  put16(out, 0);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  expect(bytes.size() >= kEndRecord, "archive too short");
  const size_t end_pos = bytes.size() - kEndRecord;
  Reader e(bytes, end_pos);
  expect(e.u32() == kEndSig, "end-of-archive signature");
  expect(e.u16() == 0 && e.u16() == 0, "disk numbers");
  const std::uint16_t n_disk = e.u16();
  const std::uint16_t n_total = e.u16();
  expect(n_disk == n_total && n_total >= 1, "entry counts");
  const std::uint32_t cd_size = e.u32();
  const std::uint32_t cd_offset = e.u32();
  expect(e.u16() == 0, "archive comment");
  expect(static_cast<size_t>(cd_offset) + cd_size == end_pos, "central directory bounds");

  Checkpoint ckpt;
  bool have_manifest = false;
  Reader c(bytes, cd_offset);
  size_t expected_local = 0;
  for (std::uint16_t k = 0; k < n_total; ++k) {
    expect(c.u32() == kCentralSig, "central signature");
    expect(c.u16() == kVersion && c.u16() == kVersion, "central version");
    expect(c.u16() == 0 && c.u16() == 0 && c.u16() == 0, "central flags/method/time");
    expect(c.u16() == kDosDate, "central date");
    const std::uint32_t crc = c.u32();
    const std::uint32_t csize = c.u32();
    expect(c.u32() == csize, "stored sizes");
    const std::uint16_t nlen = c.u16();
    expect(c.u16() == 0 && c.u16() == 0 && c.u16() == 0 && c.u16() == 0, "central extra fields");
    expect(c.u32() == 0, "external attributes");
    const std::uint32_t offset = c.u32();
    const std::string name = c.str(nlen);
    expect(offset == expected_local, "member offset");

    Reader l(bytes, offset);
    expect(l.u32() == kLocalSig, "local signature");
    expect(l.u16() == kVersion && l.u16() == 0 && l.u16() == 0 && l.u16() == 0, "local header");
    expect(l.u16() == kDosDate, "local date");
    expect(l.u32() == crc && l.u32() == csize && l.u32() == csize, "local crc/size");
    expect(l.u16() == nlen && l.u16() == 0, "local name length");
    expect(l.str(nlen) == name, "local name");
    const size_t data_pos = l.pos();
    expect(data_pos + csize <= cd_offset, "member data bounds");
    std::vector<unsigned char> data(bytes.begin() + static_cast<std::ptrdiff_t>(data_pos),
                                    bytes.begin() + static_cast<std::ptrdiff_t>(data_pos + csize));
    expect(crc_of(data) == crc, "member crc");
    expected_local = data_pos + csize;

    if (name == kManifestName) {
      expect(!have_manifest, "duplicate manifest");
      try {
        ckpt.manifest = manifest_from_json(nlohmann::json::parse(std::string(data.begin(), data.end())));
      } catch (const nlohmann::json::exception&) {
        throw IntegrityError("checkpoint archive corrupt: manifest");
      }
      have_manifest = true;
    } else {
      expect(name.size() > 4 && name.substr(name.size() - 4) == ".npy", "member name");
      const std::string key = name.substr(0, name.size() - 4);
      expect(ckpt.arrays.count(key) == 0, "duplicate member");
      ckpt.arrays.emplace(key, decode_npy(data));
    }
  }
  expect(expected_local == cd_offset, "trailing bytes before central directory");
  expect(c.pos() == end_pos, "central directory size");
  expect(have_manifest, "missing manifest");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash,
                           bool allow_mismatch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Checkpoint ckpt = decode_checkpoint(bytes);
  if (expected_hash && *expected_hash != ckpt.manifest.config_hash && !allow_mismatch) {
    throw CompatibilityError("checkpoint " + path.string() + " was built with config " +
                             hex_hash(ckpt.manifest.config_hash) + ", expected " + hex_hash(*expected_hash));
  }
  return ckpt;
}

std::uint64_t parameter_hash(const Checkpoint& ckpt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](unsigned char b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (const auto& [name, arr] : ckpt.arrays) {
    for (unsigned char ch : name) mix(static_cast<unsigned char>(ch));
    mix(0);
    for (unsigned char b : arr.data) mix(b);
  }
  return h;
}

}  // namespace treediff
