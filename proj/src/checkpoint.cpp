#include "stemnet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stemnet/errors.hpp"

namespace stemnet {

namespace {

constexpr char kMagic[4] = {'B', 'S', 'U', 'N'};
constexpr std::uint8_t kDtypeF32 = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& what) : buf_(buf), what_(what) {}

  const char* take(std::size_t n) {
    if (pos_ + n > buf_.size())
      throw FormatError(what_ + ": truncated file (needed " + std::to_string(n) + " bytes at " +
                        std::to_string(pos_) + ")");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::uint32_t u32() {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4));
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(8));
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }

  bool done() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  const std::string& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

nlohmann::json config_to_json(const UNetConfig& c) {
  return {{"levels", c.levels},
          {"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"input_extent", c.input_extent},
          {"bn_eps", static_cast<double>(c.bn_eps)},
          {"bn_momentum", static_cast<double>(c.bn_momentum)}};
}

UNetConfig config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.levels = j.at("levels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.input_extent = j.at("input_extent").get<int>();
  c.bn_eps = static_cast<float>(j.at("bn_eps").get<double>());
  c.bn_momentum = static_cast<float>(j.at("bn_momentum").get<double>());
  return c;
}

void append_tensor_record(std::string& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  out.push_back(static_cast<char>(kDtypeF32));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d = 0; d < t.rank(); ++d) put_u64(out, static_cast<std::uint64_t>(t.dim(d)));
  const std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
  const std::size_t off = out.size();
  out.resize(off + bytes);
  std::memcpy(out.data() + off, t.data(), bytes);  // little-endian host assumed
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.stage != "pretrain" && ckpt.stage != "final")
    throw ConfigError("checkpoint: stage must be 'pretrain' or 'final', got '" + ckpt.stage + "'");

  nlohmann::json header = {{"config", config_to_json(ckpt.config)},
                           {"stage", ckpt.stage},
                           {"epoch", ckpt.epoch},
                           {"seed", ckpt.seed},
                           {"has_velocity", ckpt.velocity.has_value()}};
  const std::string json = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u64(out, json.size());
  out.append(json);

  for (const auto& ref : ckpt.params.tensor_table())
    append_tensor_record(out, ref.name, *ref.tensor);
  if (ckpt.velocity) {
    for (const auto& ref : std::as_const(*ckpt.velocity).tensor_table())
      if (ref.learnable) append_tensor_record(out, "opt.v." + ref.name, *ref.tensor);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(buf, "checkpoint " + path.string());

  if (std::memcmp(r.take(4), kMagic, 4) != 0)
    throw FormatError("checkpoint " + path.string() + ": bad magic, not a BSUN file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint " + path.string() + ": version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));

  const std::uint64_t json_len = r.u64();
  nlohmann::json header;
  try {
    const char* p = r.take(json_len);
    header = nlohmann::json::parse(p, p + json_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": invalid json header: " + e.what());
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config"));
    ckpt.stage = header.at("stage").get<std::string>();
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.seed = header.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": incomplete header: " + e.what());
  }
  ckpt.config.validate();
  const bool has_velocity = header.value("has_velocity", false);

  std::map<std::string, Tensor<float>> records;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.take(name_len), name_len);
    const std::uint8_t dtype = static_cast<std::uint8_t>(*r.take(1));
    if (dtype != kDtypeF32)
      throw FormatError("checkpoint " + path.string() + ": unsupported dtype code " +
                        std::to_string(dtype) + " for tensor '" + name + "'");
    const std::uint8_t rank = static_cast<std::uint8_t>(*r.take(1));
    if (rank > 5)
      throw FormatError("checkpoint " + path.string() + ": tensor '" + name + "' has rank " +
                        std::to_string(rank));
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) shape[d] = static_cast<std::int64_t>(r.u64());
    const std::int64_t numel = shape_numel(shape);
    if (numel < 0 || static_cast<std::uint64_t>(numel) * sizeof(float) > r.remaining())
      throw FormatError("checkpoint " + path.string() + ": tensor '" + name +
                        "' payload exceeds file size");
    Tensor<float> t(shape);
    std::memcpy(t.data(), r.take(static_cast<std::size_t>(numel) * sizeof(float)),
                static_cast<std::size_t>(numel) * sizeof(float));
    if (!records.emplace(name, std::move(t)).second)
      throw FormatError("checkpoint " + path.string() + ": duplicate tensor '" + name + "'");
  }

  auto take_into = [&](UNetParams<float>& dst, const std::string& prefix) {
    for (auto& ref : dst.tensor_table()) {
      if (!prefix.empty() && !ref.learnable) continue;  // velocity covers learnable only
      const std::string key = prefix + ref.name;
      auto it = records.find(key);
      if (it == records.end())
        throw MissingTensorError("checkpoint " + path.string() + ": missing tensor '" + key + "'");
      if (it->second.shape() != ref.tensor->shape())
        throw FormatError("checkpoint " + path.string() + ": tensor '" + key + "' has shape " +
                          shape_str(it->second.shape()) + ", config expects " +
                          shape_str(ref.tensor->shape()));
      *ref.tensor = std::move(it->second);
      records.erase(it);
    }
  };

  ckpt.params = UNetParams<float>::zeros(ckpt.config);
  take_into(ckpt.params, "");
  if (has_velocity) {
    ckpt.velocity = UNetParams<float>::zeros_like(ckpt.params);
    take_into(*ckpt.velocity, "opt.v.");
  }
  if (!records.empty())
    throw FormatError("checkpoint " + path.string() + ": unexpected tensor '" +
                      records.begin()->first + "'");
  return ckpt;
}

}  // namespace stemnet
