#include "longtail/serialize.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace longtail {

namespace {

constexpr int kFormatVersion = 1;

namespace fs = std::filesystem;

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename Scalar, typename Mat>
std::string matrix_bytes(const Mat& m) {
  // column-major, matching Eigen's storage
  std::string out(static_cast<std::size_t>(m.size()) * sizeof(Scalar), '\0');
  std::memcpy(out.data(), m.data(), out.size());
  return out;
}

template <typename Scalar, typename Mat>
void bytes_to_matrix(const std::string& bytes, std::size_t offset, Mat& m) {
  const std::size_t need = static_cast<std::size_t>(m.size()) * sizeof(Scalar);
  if (offset + need > bytes.size())
    throw std::runtime_error("parameter blob too short (corrupt or truncated)");
  std::memcpy(m.data(), bytes.data() + offset, need);
}

const char* encoder_name(EncoderKind k) {
  return k == EncoderKind::recurrent ? "recurrent" : "attention";
}

EncoderKind encoder_of(const std::string& s) {
  if (s == "recurrent") return EncoderKind::recurrent;
  if (s == "attention") return EncoderKind::attention;
  throw std::runtime_error("unknown encoder kind '" + s + "'");
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::conv1d:
      return "conv1d";
    case OpKind::dilated_conv1d:
      return "dilated_conv1d";
    case OpKind::avg_pool1d:
      return "avg_pool1d";
    case OpKind::max_pool1d:
      return "max_pool1d";
    case OpKind::recurrent:
      return "recurrent";
    case OpKind::self_attention:
      return "self_attention";
  }
  return "unknown";
}

OpKind op_of(const std::string& s) {
  if (s == "conv1d") return OpKind::conv1d;
  if (s == "dilated_conv1d") return OpKind::dilated_conv1d;
  if (s == "avg_pool1d") return OpKind::avg_pool1d;
  if (s == "max_pool1d") return OpKind::max_pool1d;
  if (s == "recurrent") return OpKind::recurrent;
  if (s == "self_attention") return OpKind::self_attention;
  throw std::runtime_error("unknown op kind '" + s + "'");
}

nlohmann::json arch_config_json(const ArchConfig& a) {
  nlohmann::json j;
  j["encoder_kind"] = encoder_name(a.encoder_kind);
  j["n_encoder_layers"] = a.n_encoder_layers;
  j["hidden_dim"] = a.hidden_dim;
  j["intermediate_dim"] = a.intermediate_dim;
  j["profile_mlp_dims"] = a.profile_mlp_dims;
  j["head_mlp_dims"] = a.head_mlp_dims;
  j["embed_dim"] = a.embed_dim;
  j["attention_heads"] = a.attention_heads;
  j["profile_dim"] = a.profile_dim;
  j["vocab_size"] = a.vocab_size;
  j["max_seq_len"] = a.max_seq_len;
  return j;
}

ArchConfig arch_config_of(const nlohmann::json& j) {
  ArchConfig a;
  a.encoder_kind = encoder_of(j.at("encoder_kind").get<std::string>());
  a.n_encoder_layers = j.at("n_encoder_layers").get<int>();
  a.hidden_dim = j.at("hidden_dim").get<int>();
  a.intermediate_dim = j.at("intermediate_dim").get<int>();
  a.profile_mlp_dims = j.at("profile_mlp_dims").get<std::vector<int>>();
  a.head_mlp_dims = j.at("head_mlp_dims").get<std::vector<int>>();
  a.embed_dim = j.at("embed_dim").get<int>();
  a.attention_heads = j.at("attention_heads").get<int>();
  a.profile_dim = j.at("profile_dim").get<int>();
  a.vocab_size = j.at("vocab_size").get<int>();
  a.max_seq_len = j.at("max_seq_len").get<int>();
  return a;
}

}  // namespace

nlohmann::json arch_to_json(const ModelArch& arch) {
  nlohmann::json j;
  if (std::holds_alternative<ArchConfig>(arch)) {
    j["kind"] = "predesigned";
    j["config"] = arch_config_json(std::get<ArchConfig>(arch));
    return j;
  }
  const SearchedArch& sa = std::get<SearchedArch>(arch);
  j["kind"] = "searched";
  j["base"] = arch_config_json(sa.base);
  nlohmann::json space;
  space["n_layers"] = sa.space.n_layers;
  space["channels"] = sa.space.channels;
  space["heads"] = sa.space.heads;
  space["ops"] = nlohmann::json::array();
  for (const OpSpec& op : sa.space.op_candidates) {
    nlohmann::json jo;
    jo["kind"] = op_name(op.kind);
    jo["kernel"] = op.kernel;
    jo["dilation"] = op.dilation;
    jo["channels_in"] = op.channels_in;
    jo["channels_out"] = op.channels_out;
    jo["heads"] = op.heads;
    space["ops"].push_back(jo);
  }
  j["space"] = space;
  nlohmann::json layers = nlohmann::json::array();
  for (const Genotype::Layer& l : sa.genotype.layers) {
    nlohmann::json jl;
    jl["input"] = l.input_index;
    jl["op"] = l.op_index;
    jl["residual"] = l.residual_set;
    layers.push_back(jl);
  }
  j["genotype"] = layers;
  return j;
}

ModelArch arch_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "predesigned") return arch_config_of(j.at("config"));
  if (kind != "searched") throw std::runtime_error("unknown arch kind '" + kind + "'");
  SearchedArch sa;
  sa.base = arch_config_of(j.at("base"));
  const nlohmann::json& space = j.at("space");
  sa.space.n_layers = space.at("n_layers").get<int>();
  sa.space.channels = space.at("channels").get<int>();
  sa.space.heads = space.at("heads").get<int>();
  for (const nlohmann::json& jo : space.at("ops")) {
    OpSpec op;
    op.kind = op_of(jo.at("kind").get<std::string>());
    op.kernel = jo.at("kernel").get<int>();
    op.dilation = jo.at("dilation").get<int>();
    op.channels_in = jo.at("channels_in").get<int>();
    op.channels_out = jo.at("channels_out").get<int>();
    op.heads = jo.at("heads").get<int>();
    sa.space.op_candidates.push_back(op);
  }
  for (const nlohmann::json& jl : j.at("genotype")) {
    Genotype::Layer l;
    l.input_index = jl.at("input").get<int>();
    l.op_index = jl.at("op").get<int>();
    l.residual_set = jl.at("residual").get<std::vector<int>>();
    sa.genotype.layers.push_back(l);
  }
  return sa;
}

void save_artifact(const ModelArtifact& m, const std::string& prefix) {
  std::string blob;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, mat] : m.params) {
    nlohmann::json p;
    p["name"] = name;
    p["rows"] = mat.rows();
    p["cols"] = mat.cols();
    p["offset"] = blob.size();
    params.push_back(p);
    blob += matrix_bytes<double>(mat);
  }
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["arch"] = arch_to_json(m.arch);
  nlohmann::json prov;
  prov["strategy"] = m.provenance.strategy;
  prov["scenario"] = m.provenance.scenario;
  prov["seed"] = m.provenance.seed;
  prov["config_hash"] = m.provenance.config_hash;
  j["provenance"] = prov;
  j["params"] = params;
  j["blob_bytes"] = blob.size();
  j["checksum"] = hex64(fnv1a(blob.data(), blob.size()));
  write_file(prefix + ".json", j.dump(2) + "\n");
  write_file(prefix + ".bin", blob);
}

ModelArtifact load_artifact(const std::string& prefix) {
  const nlohmann::json j = nlohmann::json::parse(read_file(prefix + ".json"));
  const int version = j.at("format_version").get<int>();
  if (version != kFormatVersion)
    throw std::runtime_error("artifact " + prefix + ": format_version " +
                             std::to_string(version) + " is not supported (expected " +
                             std::to_string(kFormatVersion) + ")");
  const std::string blob = read_file(prefix + ".bin");
  if (blob.size() != j.at("blob_bytes").get<std::size_t>())
    throw std::runtime_error("artifact " + prefix + ": blob size mismatch (corrupt or truncated)");
  const std::string checksum = hex64(fnv1a(blob.data(), blob.size()));
  if (checksum != j.at("checksum").get<std::string>())
    throw std::runtime_error("artifact " + prefix + ": checksum mismatch");
  ModelArtifact m;
  m.arch = arch_from_json(j.at("arch"));
  const nlohmann::json& prov = j.at("provenance");
  m.provenance.strategy = prov.at("strategy").get<std::string>();
  m.provenance.scenario = prov.at("scenario").get<std::string>();
  m.provenance.seed = prov.at("seed").get<std::uint64_t>();
  m.provenance.config_hash = prov.at("config_hash").get<std::string>();
  for (const nlohmann::json& p : j.at("params")) {
    Matrix mat(p.at("rows").get<Eigen::Index>(), p.at("cols").get<Eigen::Index>());
    bytes_to_matrix<double>(blob, p.at("offset").get<std::size_t>(), mat);
    m.params.emplace(p.at("name").get<std::string>(), std::move(mat));
  }
  return m;
}

void save_scenario(const ScenarioDataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  const std::string profiles = matrix_bytes<double>(ds.profiles);
  const std::string sequences = matrix_bytes<int>(ds.sequences);
  std::string labels = matrix_bytes<double>(ds.labels);
  std::string partition(ds.partition.size(), '\0');
  for (std::size_t i = 0; i < ds.partition.size(); ++i)
    partition[i] = static_cast<char>(ds.partition[i]);

  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["scenario_id"] = ds.scenario_id;
  j["rows"] = ds.rows();
  j["profile_dim"] = ds.profile_dim();
  j["max_seq_len"] = ds.max_seq_len();
  j["vocab_size"] = ds.vocab_size;
  j["checksums"] = {{"profiles.bin", hex64(fnv1a(profiles.data(), profiles.size()))},
                    {"sequences.bin", hex64(fnv1a(sequences.data(), sequences.size()))},
                    {"labels.bin", hex64(fnv1a(labels.data(), labels.size()))},
                    {"partition.bin", hex64(fnv1a(partition.data(), partition.size()))}};
  write_file(dir + "/manifest.json", j.dump(2) + "\n");
  write_file(dir + "/profiles.bin", profiles);
  write_file(dir + "/sequences.bin", sequences);
  write_file(dir + "/labels.bin", labels);
  write_file(dir + "/partition.bin", partition);
}

ScenarioDataset load_scenario(const std::string& dir) {
  const nlohmann::json j = nlohmann::json::parse(read_file(dir + "/manifest.json"));
  const int version = j.at("format_version").get<int>();
  if (version != kFormatVersion)
    throw std::runtime_error("scenario " + dir + ": unsupported format_version " +
                             std::to_string(version));
  ScenarioDataset ds;
  ds.scenario_id = j.at("scenario_id").get<int>();
  ds.vocab_size = j.at("vocab_size").get<int>();
  const int rows = j.at("rows").get<int>();
  const int pdim = j.at("profile_dim").get<int>();
  const int slen = j.at("max_seq_len").get<int>();
  auto checked_read = [&](const std::string& name) {
    const std::string bytes = read_file(dir + "/" + name);
    const std::string expect = j.at("checksums").at(name).get<std::string>();
    if (hex64(fnv1a(bytes.data(), bytes.size())) != expect)
      throw std::runtime_error("scenario " + dir + ": checksum mismatch for " + name);
    return bytes;
  };
  ds.profiles.resize(rows, pdim);
  bytes_to_matrix<double>(checked_read("profiles.bin"), 0, ds.profiles);
  ds.sequences.resize(rows, slen);
  bytes_to_matrix<int>(checked_read("sequences.bin"), 0, ds.sequences);
  ds.labels.resize(rows);
  bytes_to_matrix<double>(checked_read("labels.bin"), 0, ds.labels);
  const std::string partition = checked_read("partition.bin");
  if (partition.size() != static_cast<std::size_t>(rows))
    throw std::runtime_error("scenario " + dir + ": partition size mismatch");
  ds.partition.resize(partition.size());
  for (std::size_t i = 0; i < partition.size(); ++i) {
    const auto tag = static_cast<unsigned char>(partition[i]);
    if (tag > 2) throw std::runtime_error("scenario " + dir + ": invalid partition tag");
    ds.partition[i] = static_cast<Part>(tag);
  }
  // the mask is derivable: 1 exactly where the event id is nonzero
  ds.seq_mask.resize(rows, slen);
  for (int r = 0; r < rows; ++r)
    for (int t = 0; t < slen; ++t) ds.seq_mask(r, t) = ds.sequences(r, t) != 0 ? 1.0 : 0.0;
  ds.validate();
  return ds;
}

void save_meta_state(const MetaState& s, const std::string& dir) {
  fs::create_directories(dir);
  save_artifact(s.agnostic, dir + "/agnostic");
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["gamma"] = s.cfg.gamma;
  j["eta"] = s.cfg.eta;
  j["inner_steps"] = s.cfg.inner_steps;
  j["batch_size"] = s.cfg.batch_size;
  j["staleness_bound"] = s.cfg.staleness_bound;
  j["second_order"] = s.cfg.second_order;
  j["version"] = s.version;
  nlohmann::json archive = nlohmann::json::array();
  for (std::size_t i = 0; i < s.archive.size(); ++i) {
    const std::string sub = "archive/" + std::to_string(s.archive[i]->scenario_id);
    save_scenario(*s.archive[i], dir + "/" + sub);
    archive.push_back(sub);
  }
  j["archive"] = archive;
  write_file(dir + "/meta.json", j.dump(2) + "\n");
}

MetaState load_meta_state(const std::string& dir) {
  const nlohmann::json j = nlohmann::json::parse(read_file(dir + "/meta.json"));
  if (j.at("format_version").get<int>() != kFormatVersion)
    throw std::runtime_error("meta state " + dir + ": unsupported format_version");
  MetaState s;
  s.agnostic = load_artifact(dir + "/agnostic");
  s.cfg.gamma = j.at("gamma").get<double>();
  s.cfg.eta = j.at("eta").get<double>();
  s.cfg.inner_steps = j.at("inner_steps").get<int>();
  s.cfg.batch_size = j.at("batch_size").get<int>();
  s.cfg.staleness_bound = j.at("staleness_bound").get<long>();
  s.cfg.second_order = j.at("second_order").get<bool>();
  s.version = j.at("version").get<long>();
  for (const nlohmann::json& sub : j.at("archive"))
    s.archive.push_back(std::make_shared<ScenarioDataset>(
        load_scenario(dir + "/" + sub.get<std::string>())));
  return s;
}

}  // namespace longtail
