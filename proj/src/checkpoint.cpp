#include "homodistil/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <vector>

namespace homodistil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

std::uint64_t fnv1a(const unsigned char* p, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

std::vector<unsigned char> to_bytes(const MatrixD& m) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(m.size()) * sizeof(double));
  std::memcpy(bytes.data(), m.data(), bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 8) std::reverse(bytes.begin() + i, bytes.begin() + i + 8);
  }
  return bytes;
}

MatrixD from_bytes(std::vector<unsigned char> bytes, Index rows, Index cols) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < bytes.size(); i += 8) std::reverse(bytes.begin() + i, bytes.begin() + i + 8);
  }
  MatrixD m(rows, cols);
  std::memcpy(m.data(), bytes.data(), bytes.size());
  return m;
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

class BlobWriter {
 public:
  explicit BlobWriter(fs::path dir) : dir_(std::move(dir)) {}

  void put(const std::string& name, const MatrixD& m) {
    if (index_.contains(name)) throw ContractError("duplicate checkpoint tensor '" + name + "'");
    const auto bytes = to_bytes(m);
    const std::string file = name + ".bin";
    std::ofstream out(dir_ / file, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + (dir_ / file).string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to " + (dir_ / file).string());
    index_[name] = {{"file", file}, {"rows", m.rows()}, {"cols", m.cols()}, {"fnv1a64", fnv1a_hex(bytes.data(), bytes.size())}};
  }

  const json& index() const { return index_; }

 private:
  fs::path dir_;
  json index_ = json::object();
};

class BlobReader {
 public:
  BlobReader(fs::path dir, json index) : dir_(std::move(dir)), index_(std::move(index)) {}

  bool has(const std::string& name) const { return index_.contains(name); }

  MatrixD get(const std::string& name) const {
    if (!index_.contains(name)) throw InputError("checkpoint is missing tensor '" + name + "'");
    const json& e = index_.at(name);
    const Index rows = e.at("rows").get<Index>();
    const Index cols = e.at("cols").get<Index>();
    auto bytes = read_file(dir_ / e.at("file").get<std::string>());
    if (bytes.size() != static_cast<std::size_t>(rows * cols) * sizeof(double)) {
      throw IntegrityError("tensor '" + name + "': blob holds " + std::to_string(bytes.size()) + " bytes, expected " +
                           std::to_string(rows * cols * 8));
    }
    if (fnv1a_hex(bytes.data(), bytes.size()) != e.at("fnv1a64").get<std::string>()) {
      throw IntegrityError("tensor '" + name + "': checksum mismatch");
    }
    return from_bytes(std::move(bytes), rows, cols);
  }

 private:
  fs::path dir_;
  json index_;
};

json heads_to_json(const TransformerModel& m) {
  json out = json::array();
  for (const auto& l : m.layers) out.push_back({{"qk", l.heads.qk_widths}, {"v", l.heads.v_widths}});
  return out;
}

Tensor load_param(const BlobReader& r, const std::string& name) { return Tensor::parameter(r.get("model." + name)); }

TransformerModel load_model(const json& manifest, const BlobReader& r) {
  TransformerModel m;
  m.config = model_config_from_json(manifest.at("model_config"));
  m.attention_scale = manifest.at("attention_scale").get<double>();
  m.token_embedding = load_param(r, "embeddings.token");
  m.position_embedding = load_param(r, "embeddings.position");
  m.emb_ln_gamma = load_param(r, "embeddings.norm.gamma");
  m.emb_ln_beta = load_param(r, "embeddings.norm.beta");
  const json& heads = manifest.at("heads");
  if (static_cast<Index>(heads.size()) != m.config.num_layers) throw InputError("checkpoint head layout has wrong layer count");
  for (Index l = 0; l < m.config.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.wq = load_param(r, p + "attention.query.weight");
    layer.bq = load_param(r, p + "attention.query.bias");
    layer.wk = load_param(r, p + "attention.key.weight");
    layer.bk = load_param(r, p + "attention.key.bias");
    layer.wv = load_param(r, p + "attention.value.weight");
    layer.bv = load_param(r, p + "attention.value.bias");
    layer.wo = load_param(r, p + "attention.output.weight");
    layer.bo = load_param(r, p + "attention.output.bias");
    layer.ln1_gamma = load_param(r, p + "attention.norm.gamma");
    layer.ln1_beta = load_param(r, p + "attention.norm.beta");
    layer.w_in = load_param(r, p + "ffn.input.weight");
    layer.b_in = load_param(r, p + "ffn.input.bias");
    layer.w_out = load_param(r, p + "ffn.output.weight");
    layer.b_out = load_param(r, p + "ffn.output.bias");
    layer.ln2_gamma = load_param(r, p + "ffn.norm.gamma");
    layer.ln2_beta = load_param(r, p + "ffn.norm.beta");
    const json& h = heads.at(static_cast<std::size_t>(l));
    layer.heads.qk_widths = h.at("qk").get<std::vector<Index>>();
    layer.heads.v_widths = h.at("v").get<std::vector<Index>>();
    if (layer.heads.qk_total() != layer.wq.cols() || layer.heads.v_total() != layer.wv.cols()) {
      throw InputError("checkpoint head layout of layer " + std::to_string(l) + " disagrees with weight shapes");
    }
    m.layers.push_back(std::move(layer));
  }
  m.mlm_bias = load_param(r, "mlm.bias");
  const MatrixD live = r.get("model.hidden_live");
  m.hidden_live = live.row(0);
  if (m.hidden_live.size() != m.token_embedding.cols()) throw InputError("checkpoint hidden_live has wrong width");
  return m;
}

}  // namespace

std::string fnv1a_hex(const void* data, std::size_t size) {
  return hex64(fnv1a(static_cast<const unsigned char*>(data), size));
}

json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"num_layers", c.num_layers},
          {"hidden_dim", c.hidden_dim}, {"ffn_dim", c.ffn_dim},         {"num_heads", c.num_heads},
          {"layernorm_eps", c.layernorm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<Index>();
    c.max_seq_len = j.at("max_seq_len").get<Index>();
    c.num_layers = j.at("num_layers").get<Index>();
    c.hidden_dim = j.at("hidden_dim").get<Index>();
    c.ffn_dim = j.at("ffn_dim").get<Index>();
    c.num_heads = j.at("num_heads").get<Index>();
    c.layernorm_eps = j.at("layernorm_eps").get<double>();
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed model config in checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && (entry.path().extension() == ".bin" || entry.path().filename() == kManifestName)) {
      fs::remove(entry.path());
    }
  }

  BlobWriter w(dir);
  const TransformerModel& m = ckpt.model;
  for (const auto& p : m.parameters()) w.put("model." + p.name, p.tensor.value());
  w.put("model.hidden_live", MatrixD(m.hidden_live));

  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["model_config"] = to_json(m.config);
  manifest["attention_scale"] = m.attention_scale;
  manifest["heads"] = heads_to_json(m);
  manifest["counters"] = ckpt.counters;
  manifest["metadata"] = ckpt.metadata;

  if (ckpt.projections) {
    for (const auto& p : ckpt.projections->parameters()) {
      const std::string key = p.role == ParamRole::HiddenProjection ? "hidden" : "embedding";
      w.put("proj." + key, p.tensor.value());
    }
    manifest["projections"] = true;
  }
  if (ckpt.masks) {
    json groups = json::object();
    for (const auto& [g, mask] : ckpt.masks->masks) {
      w.put("mask." + g.name(), MatrixD(mask));
      groups[g.name()] = {{"original_width", ckpt.masks->original_width.at(g)}, {"kept", ckpt.masks->kept(g)}};
    }
    manifest["masks"] = groups;
  }
  if (ckpt.importance) {
    const auto& s = *ckpt.importance;
    for (const auto& [name, buf] : s.score_ema) w.put("ema.score." + name, buf);
    for (const auto& [name, buf] : s.uncertainty_ema) w.put("ema.uncertainty." + name, buf);
    manifest["importance"] = {{"scorer", pruning::to_string(s.kind)},
                              {"beta_ema", s.beta_ema},
                              {"beta_uncertainty", s.beta_uncertainty},
                              {"updates", s.updates}};
  }
  if (ckpt.optimizer) {
    const Adam& a = *ckpt.optimizer;
    for (const auto& [name, mom] : a.moments()) {
      w.put("adam.m." + name, mom.first);
      w.put("adam.v." + name, mom.second);
    }
    const AdamConfig& c = a.config();
    manifest["optimizer"] = {{"beta1", c.beta1},
                             {"beta2", c.beta2},
                             {"eps", c.eps},
                             {"weight_decay", c.weight_decay},
                             {"grad_clip", c.grad_clip},
                             {"step_count", a.step_count()}};
  }
  manifest["tensors"] = w.index();

  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw InputError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw InputError("no checkpoint manifest at " + manifest_path.string());
  json manifest;
  try {
    std::ifstream in(manifest_path);
    in >> manifest;
  } catch (const json::exception& e) {
    throw InputError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }

  try {
    if (manifest.at("format_version").get<int>() != kFormatVersion) {
      throw InputError("unsupported checkpoint format version in " + manifest_path.string());
    }
    BlobReader r(dir, manifest.at("tensors"));
    Checkpoint ckpt;
    ckpt.model = load_model(manifest, r);
    ckpt.counters = manifest.value("counters", json::object());
    ckpt.metadata = manifest.value("metadata", json::object());

    if (manifest.value("projections", false)) {
      ckpt.projections = ProjectionSet{Tensor::parameter(r.get("proj.hidden")), Tensor::parameter(r.get("proj.embedding"))};
    }
    if (manifest.contains("masks")) {
      pruning::MaskSet masks;
      for (const auto& [name, info] : manifest.at("masks").items()) {
        const pruning::GroupId g = pruning::GroupId::parse(name);
        masks.masks[g] = r.get("mask." + name).row(0);
        masks.original_width[g] = info.at("original_width").get<Index>();
      }
      ckpt.masks = std::move(masks);
    }
    if (manifest.contains("importance")) {
      const json& info = manifest.at("importance");
      pruning::ImportanceState s;
      s.kind = pruning::parse_scorer(info.at("scorer").get<std::string>());
      s.beta_ema = info.at("beta_ema").get<double>();
      s.beta_uncertainty = info.at("beta_uncertainty").get<double>();
      s.updates = info.at("updates").get<long>();
      const std::string score_prefix = "ema.score.";
      const std::string unc_prefix = "ema.uncertainty.";
      for (const auto& [name, _] : manifest.at("tensors").items()) {
        if (name.starts_with(score_prefix)) s.score_ema[name.substr(score_prefix.size())] = r.get(name);
        if (name.starts_with(unc_prefix)) s.uncertainty_ema[name.substr(unc_prefix.size())] = r.get(name);
      }
      ckpt.importance = std::move(s);
    }
    if (manifest.contains("optimizer")) {
      const json& info = manifest.at("optimizer");
      AdamConfig c;
      c.beta1 = info.at("beta1").get<double>();
      c.beta2 = info.at("beta2").get<double>();
      c.eps = info.at("eps").get<double>();
      c.weight_decay = info.at("weight_decay").get<double>();
      c.grad_clip = info.at("grad_clip").get<double>();
      Adam a(c);
      a.set_step_count(info.at("step_count").get<long>());
      const std::string m_prefix = "adam.m.";
      for (const auto& [name, _] : manifest.at("tensors").items()) {
        if (!name.starts_with(m_prefix)) continue;
        const std::string param = name.substr(m_prefix.size());
        a.moments()[param] = Adam::Moments{r.get(name), r.get("adam.v." + param)};
      }
      ckpt.optimizer = std::move(a);
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw InputError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
}

std::string checkpoint_digest(const fs::path& dir) {
  if (!fs::exists(dir / kManifestName)) throw InputError("no checkpoint manifest in " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && (entry.path().extension() == ".bin" || entry.path().filename() == kManifestName)) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    h = fnv1a(reinterpret_cast<const unsigned char*>(name.data()), name.size(), h);
    const auto bytes = read_file(f);
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return hex64(h);
}

}  // namespace homodistil
