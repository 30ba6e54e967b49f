#include "scinet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "scinet/errors.hpp"

namespace scinet {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

constexpr char kMagic[8] = {'S', 'C', 'I', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint8_t kFloat32 = 1;

class Writer {
 public:
  template <typename U>
  void put(U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out_.append(reinterpret_cast<const char*>(bytes), sizeof(U));
  }
  void put_bytes(const void* data, std::size_t size) { out_.append(static_cast<const char*>(data), size); }
  void put_array(const NamedArray& a) {
    if (a.name.size() > 0xffff) throw CheckpointError("array name too long: " + a.name);
    if (a.values.size() != a.shape.numel())
      throw CheckpointError("array '" + a.name + "' has " + std::to_string(a.values.size()) + " values for shape " +
                            a.shape.str());
    put(static_cast<std::uint16_t>(a.name.size()));
    put_bytes(a.name.data(), a.name.size());
    put(kFloat32);
    put(std::uint8_t{4});
    for (std::size_t d : {a.shape.n, a.shape.c, a.shape.h, a.shape.w}) put(static_cast<std::uint64_t>(d));
    for (float v : a.values) put(v);
  }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    unsigned char raw[sizeof(U)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, raw, sizeof(U));
    return value;
  }
  std::string get_string(std::size_t size, const char* what) {
    need(size, what);
    std::string s(bytes_.substr(pos_, size));
    pos_ += size;
    return s;
  }
  NamedArray get_array() {
    NamedArray a;
    a.name = get_string(get<std::uint16_t>("name length"), "array name");
    if (get<std::uint8_t>("element type") != kFloat32) throw CheckpointError("array '" + a.name + "': unsupported element type");
    if (get<std::uint8_t>("rank") != 4) throw CheckpointError("array '" + a.name + "': unsupported rank");
    std::uint64_t dims[4];
    for (auto& d : dims) d = get<std::uint64_t>("dimension");
    a.shape = Shape{dims[0], dims[1], dims[2], dims[3]};
    const std::uint64_t numel = dims[0] * dims[1] * dims[2] * dims[3];
    need(numel * sizeof(float), "array payload");
    a.values.resize(numel);
    for (auto& v : a.values) v = get<float>("value");
    return a;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t size, const char* what) const {
    if (size > bytes_.size() - pos_)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint capture(Model<float>& model) {
  Checkpoint ck;
  ck.config = model.config();
  auto add = [&ck](const ParamView<float>& p) {
    ck.arrays.push_back({p.name, p.shape, std::vector<float>(p.value.begin(), p.value.end())});
  };
  for (const auto& p : model.parameters()) add(p);
  for (const auto& b : model.buffers()) add(b);
  return ck;
}

void restore(Model<float>& model, const Checkpoint& checkpoint) {
  auto views = model.parameters();
  for (auto& b : model.buffers()) views.push_back(b);
  const std::size_t common = std::min(views.size(), checkpoint.arrays.size());
  for (std::size_t i = 0; i < common; ++i) {
    const auto& v = views[i];
    const auto& a = checkpoint.arrays[i];
    if (v.name != a.name)
      throw CheckpointError("parameter mismatch at entry " + std::to_string(i) + ": model expects '" + v.name +
                            "', checkpoint has '" + a.name + "'");
    if (!(v.shape == a.shape))
      throw CheckpointError("parameter '" + v.name + "' has shape " + a.shape.str() + " in the checkpoint but " +
                            v.shape.str() + " in the model");
  }
  if (views.size() != checkpoint.arrays.size()) {
    const std::string first = views.size() > common ? views[common].name : checkpoint.arrays[common].name;
    throw CheckpointError("parameter '" + first + "' is present in only one of model and checkpoint (model has " +
                          std::to_string(views.size()) + " arrays, checkpoint " +
                          std::to_string(checkpoint.arrays.size()) + ")");
  }
  if (!(model.config() == checkpoint.config)) {
    std::string keys;
    const auto a = model.config().to_json();
    const auto b = checkpoint.config.to_json();
    for (const auto& [key, value] : a.items())
      if (!b.contains(key) || b.at(key) != value) keys += (keys.empty() ? "" : ", ") + key;
    throw CheckpointError("model config differs from the checkpoint's in: " + keys);
  }
  for (std::size_t i = 0; i < views.size(); ++i)
    std::copy(checkpoint.arrays[i].values.begin(), checkpoint.arrays[i].values.end(), views[i].value.begin());
}

std::string serialize(const Checkpoint& ck) {
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kCheckpointVersion);
  w.put(ck.config.digest());
  const std::string config_text = ck.config.to_json().dump();
  w.put(static_cast<std::uint32_t>(config_text.size()));
  w.put_bytes(config_text.data(), config_text.size());
  w.put(ck.best_metric);
  w.put(ck.best_epoch);
  w.put(static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) w.put_array(a);
  w.put(static_cast<std::uint8_t>(ck.has_optimizer ? 1 : 0));
  if (ck.has_optimizer) {
    w.put(ck.optimizer_step);
    w.put(static_cast<std::uint32_t>(ck.optimizer.size()));
    for (const auto& a : ck.optimizer) w.put_array(a);
  }
  w.put(fnv1a(w.bytes().data(), w.bytes().size()));
  return std::move(w.bytes());
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  if (bytes.size() < sizeof(kMagic) + 4 + 8) throw CheckpointError("checkpoint truncated in header");
  // The checksum covers everything, so verify it before trusting any length field.
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  Reader tail(std::string_view(bytes).substr(body));
  if (tail.get<std::uint64_t>("checksum") != fnv1a(bytes.data(), body))
    throw CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)");

  Reader r(std::string_view(bytes.data(), body));
  r.get_string(sizeof(kMagic), "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto digest = r.get<std::uint64_t>("config digest");
  const std::string config_text = r.get_string(r.get<std::uint32_t>("config length"), "config");
  Checkpoint ck;
  try {
    ck.config = ModelConfig::from_json(nlohmann::json::parse(config_text));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  }
  if (ck.config.digest() != digest) throw CheckpointError("checkpoint config digest does not match its config");
  ck.best_metric = r.get<double>("best metric");
  ck.best_epoch = r.get<std::int64_t>("best epoch");
  const auto count = r.get<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < count; ++i) ck.arrays.push_back(r.get_array());
  ck.has_optimizer = r.get<std::uint8_t>("optimizer flag") != 0;
  if (ck.has_optimizer) {
    ck.optimizer_step = r.get<std::uint64_t>("optimizer step");
    const auto n = r.get<std::uint32_t>("optimizer array count");
    for (std::uint32_t i = 0; i < n; ++i) ck.optimizer.push_back(r.get_array());
  }
  if (r.position() != body) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const std::string bytes = serialize(checkpoint);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

void save_checkpoint(Model<float>& model, const std::filesystem::path& path) {
  write_checkpoint(path, capture(model));
}

std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  const Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<Model<float>>(config, 0);
  restore(*model, ck);
  return model;
}

std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  auto model = std::make_unique<Model<float>>(ck.config, 0);
  restore(*model, ck);
  return model;
}

}  // namespace scinet
