#include "bioenc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace bioenc {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'V', 'S', 'C'};
constexpr std::uint8_t kDtypeF32 = 0;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::span<const std::uint8_t> bytes(std::size_t n) {
    if (n > b_.size() - pos_) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    const auto s = bytes(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(s[i]) << (8 * i));
    return v;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

const char* mode_name(HeadMode m) { return m == HeadMode::kSoftmaxCe ? "softmax_ce" : "sigmoid_bce"; }

HeadMode mode_from_name(const std::string& s) {
  if (s == "softmax_ce") return HeadMode::kSoftmaxCe;
  if (s == "sigmoid_bce") return HeadMode::kSigmoidBce;
  throw DataError("checkpoint: unknown classifier mode '" + s + "'");
}

const Tensor& require(const CheckpointContainer& c, const std::string& name) {
  const auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

}  // namespace

std::vector<std::uint8_t> serialize(const CheckpointContainer& container) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(CheckpointContainer::kFormatVersion);
  const std::string meta = container.metadata.dump();
  w.le<std::uint64_t>(meta.size());
  w.bytes(meta.data(), meta.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(container.tensors.size()));
  for (const auto& [name, t] : container.tensors) {
    std::uint64_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != t.data.size()) throw std::invalid_argument("tensor '" + name + "' shape does not match payload");
    w.le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(kDtypeF32);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.le<std::uint64_t>(d);
    w.le<std::uint64_t>(count * 4);
    for (float f : t.data) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(f));
  }
  return w.take();
}

CheckpointContainer deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("checkpoint: bad magic (expected AVSC)");
  const auto version = r.le<std::uint32_t>();
  if (version != CheckpointContainer::kFormatVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  }
  CheckpointContainer c;
  const auto meta_len = r.le<std::uint64_t>();
  const auto meta = r.bytes(static_cast<std::size_t>(meta_len));
  try {
    c.metadata = json::parse(meta.begin(), meta.end());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed metadata: ") + e.what());
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>();
    const auto name_bytes = r.bytes(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    if (r.le<std::uint8_t>() != kDtypeF32) throw DataError("checkpoint: tensor '" + name + "' has unsupported dtype");
    Tensor t;
    const auto ndim = r.le<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(r.le<std::uint64_t>());
      n *= t.shape.back();
    }
    if (r.le<std::uint64_t>() != n * 4) throw DataError("checkpoint: tensor '" + name + "' payload length mismatch");
    t.data.resize(static_cast<std::size_t>(n));
    for (auto& f : t.data) f = std::bit_cast<float>(r.le<std::uint32_t>());
    if (!c.tensors.emplace(std::move(name), std::move(t)).second) {
      throw DataError("checkpoint: duplicate tensor name");
    }
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointContainer& container) {
  const auto bytes = serialize(container);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

CheckpointContainer load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

Tensor to_tensor(const Mat& m) {
  Tensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

Mat to_mat(const Tensor& t) {
  if (t.shape.size() != 2) throw DataError("checkpoint: expected a 2-D tensor");
  Mat m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t.data[static_cast<std::size_t>(i)];
  return m;
}

json to_json(const ModelConfig& config) {
  json cnn = json::array();
  for (const auto& c : config.cnn) cnn.push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}});
  return {{"sample_rate", config.sample_rate}, {"cnn", cnn},
          {"depth", config.depth},             {"hidden_dim", config.hidden_dim},
          {"heads", config.heads},             {"ffn_dim", config.ffn_dim},
          {"proj_dim", config.proj_dim},       {"num_units", config.num_units},
          {"temperature", config.temperature}, {"mask_span", config.mask_span},
          {"mask_start_prob", config.mask_start_prob}, {"dropout", config.dropout},
          {"positional", config.positional}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.sample_rate = j.at("sample_rate").get<int>();
    c.cnn.clear();
    for (const auto& l : j.at("cnn")) {
      c.cnn.push_back({l.at("channels").get<int>(), l.at("kernel").get<int>(), l.at("stride").get<int>()});
    }
    c.depth = j.at("depth").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.num_units = j.at("num_units").get<int>();
    c.temperature = j.at("temperature").get<double>();
    c.mask_span = j.at("mask_span").get<int>();
    c.mask_start_prob = j.at("mask_start_prob").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.positional = j.at("positional").get<bool>();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed model config: ") + e.what());
  }
}

void put_model(CheckpointContainer& c, const EncoderModel& model) {
  c.metadata["model"] = to_json(model.config());
  if (model.classifier) {
    c.metadata["classifier"] = {{"classes", model.classifier->classes()},
                                {"mode", mode_name(model.classifier->mode)}};
  } else {
    c.metadata.erase("classifier");
  }
  model.for_each_param(EncoderModel::ConstParamVisitor(
      [&](const std::string& name, ParamGroup, const Param& p) { c.tensors["model." + name] = to_tensor(p.value); }));
}

EncoderModel get_model(const CheckpointContainer& c) {
  if (!c.metadata.contains("model")) throw DataError("checkpoint: no model stored");
  ModelConfig config = model_config_from_json(c.metadata.at("model"));
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  EncoderModel model(config, 0);
  if (c.metadata.contains("classifier")) {
    const auto& h = c.metadata.at("classifier");
    model.attach_classifier(h.at("classes").get<int>(), mode_from_name(h.at("mode").get<std::string>()), 0);
  }
  model.for_each_param(EncoderModel::ParamVisitor([&](const std::string& name, ParamGroup, Param& p) {
    Mat m = to_mat(require(c, "model." + name));
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw DataError("checkpoint: tensor 'model." + name + "' has the wrong shape");
    }
    p.value = std::move(m);
    p.zero_grad();
  }));
  return model;
}

void put_codebook(CheckpointContainer& c, const std::string& prefix, const Codebook& codebook) {
  c.tensors[prefix + ".centroids"] = to_tensor(codebook.centroids);
  if (codebook.input_stats.mean.size() > 0) {
    c.tensors[prefix + ".mean"] = to_tensor(codebook.input_stats.mean);
    c.tensors[prefix + ".std"] = to_tensor(codebook.input_stats.std);
  }
  const auto& m = codebook.fit_meta;
  c.metadata["codebooks"][prefix] = {{"stage", codebook.stage},
                                     {"k", codebook.k()},
                                     {"feature_dim", codebook.feature_dim()},
                                     {"iterations", m.iterations},
                                     {"final_distortion", m.final_distortion},
                                     {"seed", m.seed},
                                     {"fit_frames", m.fit_frames},
                                     {"distortion_trace", m.distortion_trace}};
}

Codebook get_codebook(const CheckpointContainer& c, const std::string& prefix) {
  Codebook cb;
  cb.centroids = to_mat(require(c, prefix + ".centroids"));
  if (c.tensors.contains(prefix + ".mean")) {
    cb.input_stats.mean = to_mat(require(c, prefix + ".mean")).row(0);
    cb.input_stats.std = to_mat(require(c, prefix + ".std")).row(0);
  }
  if (c.metadata.contains("codebooks") && c.metadata["codebooks"].contains(prefix)) {
    const auto& j = c.metadata["codebooks"][prefix];
    cb.stage = j.at("stage").get<int>();
    cb.fit_meta.iterations = j.at("iterations").get<int>();
    cb.fit_meta.final_distortion = j.at("final_distortion").get<double>();
    cb.fit_meta.seed = j.at("seed").get<std::uint64_t>();
    cb.fit_meta.fit_frames = j.at("fit_frames").get<std::size_t>();
    cb.fit_meta.distortion_trace = j.at("distortion_trace").get<std::vector<double>>();
  }
  return cb;
}

void put_units(CheckpointContainer& c, const std::string& prefix, std::span<const UnitSequence> units) {
  for (const auto& u : units) {
    Tensor t;
    t.shape = {static_cast<std::uint64_t>(u.units.size())};
    for (int v : u.units) t.data.push_back(static_cast<float>(v));
    c.tensors[prefix + "." + u.source_id] = std::move(t);
  }
}

std::vector<UnitSequence> get_units(const CheckpointContainer& c, const std::string& prefix) {
  std::vector<UnitSequence> out;
  const std::string key = prefix + ".";
  for (auto it = c.tensors.lower_bound(key); it != c.tensors.end() && it->first.starts_with(key); ++it) {
    UnitSequence u;
    u.source_id = it->first.substr(key.size());
    for (float f : it->second.data) u.units.push_back(static_cast<int>(f));
    out.push_back(std::move(u));
  }
  return out;
}

std::string units_to_jsonl(std::span<const UnitSequence> units) {
  std::ostringstream os;
  for (const auto& u : units) os << json{{"source_id", u.source_id}, {"units", u.units}}.dump() << '\n';
  return os.str();
}

}  // namespace bioenc
