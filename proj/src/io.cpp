#include "stgcn/io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "stgcn/errors.hpp"

namespace stgcn::io {

using nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'S', 'T', 'G', 'C', 'N', 'C', 'K', 'P'};
constexpr int kManifestVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(b)])) << (8 * b);
    pos_ += 8;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(b)])) << (8 * b);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("unexpected end of binary data");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

json scenario_to_json(const ScenarioConfig& c) {
  json j;
  j["fault_bus"] = c.fault_bus ? json(*c.fault_bus) : json(nullptr);
  j["planted_bus"] = c.planted_bus ? json(*c.planted_bus) : json(nullptr);
  j["severity_min"] = c.severity_min;
  j["severity_max"] = c.severity_max;
  j["motor_ratios"] = c.motor_ratios;
  j["sample_rate"] = c.sample_rate;
  j["window_seconds"] = c.window_seconds;
  j["label_window_seconds"] = c.label_window_seconds;
  j["seed"] = c.seed;
  j["operating_point_seed"] = c.operating_point_seed;
  const auto& m = c.model;
  j["trajectory"] = {{"rho", m.rho},
                     {"collapse_threshold", m.collapse_threshold},
                     {"v_low", m.v_low},
                     {"tau", m.tau},
                     {"tau_collapse", m.tau_collapse},
                     {"kappa", m.kappa},
                     {"low_voltage", m.low_voltage},
                     {"max_low_seconds", m.max_low_seconds}};
  return j;
}

ScenarioConfig scenario_from_json(const json& j) {
  ScenarioConfig c;
  if (!j.at("fault_bus").is_null()) c.fault_bus = j.at("fault_bus").get<std::size_t>();
  if (j.contains("planted_bus") && !j.at("planted_bus").is_null()) c.planted_bus = j.at("planted_bus").get<std::size_t>();
  c.severity_min = j.at("severity_min").get<double>();
  c.severity_max = j.at("severity_max").get<double>();
  c.motor_ratios = j.at("motor_ratios").get<std::vector<double>>();
  c.sample_rate = j.at("sample_rate").get<double>();
  c.window_seconds = j.at("window_seconds").get<double>();
  c.label_window_seconds = j.at("label_window_seconds").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.operating_point_seed = j.at("operating_point_seed").get<std::uint64_t>();
  const auto& t = j.at("trajectory");
  c.model.rho = t.at("rho").get<double>();
  c.model.collapse_threshold = t.at("collapse_threshold").get<double>();
  c.model.v_low = t.at("v_low").get<double>();
  c.model.tau = t.at("tau").get<double>();
  c.model.tau_collapse = t.at("tau_collapse").get<double>();
  c.model.kappa = t.at("kappa").get<double>();
  c.model.low_voltage = t.at("low_voltage").get<double>();
  c.model.max_low_seconds = t.at("max_low_seconds").get<double>();
  return c;
}

json model_to_json(const ModelConfig& m) {
  return {{"cheb_order", m.cheb_order}, {"blocks", m.blocks},   {"hidden", m.hidden}, {"kernel_t", m.kernel_t},
          {"dropout", m.dropout},       {"window", m.window},   {"buses", m.buses}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.cheb_order = j.at("cheb_order").get<int>();
  m.blocks = j.at("blocks").get<int>();
  m.hidden = j.at("hidden").get<int>();
  m.kernel_t = j.at("kernel_t").get<int>();
  m.dropout = j.at("dropout").get<double>();
  m.window = j.at("window").get<std::size_t>();
  m.buses = j.at("buses").get<std::size_t>();
  return m;
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Topology

std::string format_topology(const Topology& topology) {
  std::ostringstream os;
  os << "n " << topology.size() << '\n';
  for (const auto& e : topology.edges()) os << e.i << ' ' << e.j << ' ' << format_double(e.weight) << '\n';
  return os.str();
}

Topology parse_topology(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  bool have_header = false;
  std::vector<Edge> edges;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    if (!have_header) {
      std::string tag;
      long long count = -1;
      if (!(ls >> tag >> count) || tag != "n" || count < 1) {
        throw FormatError("topology line " + std::to_string(lineno) + ": expected 'n <count>'");
      }
      n = static_cast<std::size_t>(count);
      have_header = true;
      continue;
    }
    long long i = -1, j = -1;
    std::string wtext;
    if (!(ls >> i >> j >> wtext) || i < 0 || j < 0) {
      throw FormatError("topology line " + std::to_string(lineno) + ": expected 'i j w'");
    }
    std::string rest;
    if (ls >> rest) throw FormatError("topology line " + std::to_string(lineno) + ": trailing fields");
    char* end = nullptr;
    const double w = std::strtod(wtext.c_str(), &end);
    if (end == wtext.c_str() || *end != '\0') {
      throw FormatError("topology line " + std::to_string(lineno) + ": bad weight '" + wtext + "'");
    }
    edges.push_back({static_cast<std::size_t>(i), static_cast<std::size_t>(j), w});
  }
  if (!have_header) throw FormatError("topology file is empty");
  return Topology::from_edges(n, edges);
}

void save_topology(const fs::path& path, const Topology& topology) { write_file_atomic(path, format_topology(topology)); }

Topology load_topology(const fs::path& path) { return parse_topology(read_file(path)); }

// ---------------------------------------------------------------------------
// Dataset

std::string encode_samples(const std::vector<SvsSample>& samples) {
  std::string out;
  for (const auto& s : samples) {
    out.push_back(static_cast<char>(s.label));
    for (auto c : kChannels) {
      for (double v : s.channel(c).data()) put_f64(out, v);
    }
  }
  return out;
}

std::vector<SvsSample> decode_samples(const std::string& bytes, std::size_t steps, std::size_t buses,
                                      std::size_t count) {
  const std::size_t per = steps * buses;
  if (bytes.size() != count * (1 + 3 * per * 8)) {
    throw FormatError("samples file holds " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(count * (1 + 3 * per * 8)));
  }
  Reader r(bytes);
  std::vector<SvsSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    SvsSample s;
    const auto label = r.u8();
    if (label > 1) throw FormatError("bad label byte in sample " + std::to_string(k));
    s.label = static_cast<Label>(label);
    for (Tensor* t : {&s.V, &s.P, &s.Q}) {
      std::vector<double> v(per);
      for (auto& x : v) x = r.f64();
      *t = Tensor({steps, buses}, std::move(v));
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const fs::path& dir, const LabeledDataset& ds) {
  const std::size_t steps = ds.samples.empty() ? ds.config.window_steps() : ds.samples.front().steps();
  json m;
  m["format_version"] = kManifestVersion;
  m["config"] = scenario_to_json(ds.config);
  m["seed"] = ds.config.seed;
  m["n"] = ds.topology.size();
  m["N"] = steps;
  m["count"] = ds.samples.size();
  m["unstable_count"] = ds.unstable_count();
  m["topology_file"] = kTopologyName;
  m["samples_file"] = kSamplesName;
  m["snr_db"] = ds.snr_db ? json(*ds.snr_db) : json(nullptr);
  m["noise_seed"] = ds.noise_seed;
  m["topology_changes"] = ds.topology_changes;
  json prov = json::array();
  for (const auto& p : ds.provenance) prov.push_back({p.fault_bus, p.severity, p.motor_ratio});
  m["provenance"] = prov;

  save_topology(dir / kTopologyName, ds.topology);
  write_file_atomic(dir / kSamplesName, encode_samples(ds.samples));
  write_file_atomic(dir / kManifestName, m.dump(2) + "\n");
}

LabeledDataset load_dataset(const fs::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / kManifestName));
  } catch (const json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
  try {
    if (m.at("format_version").get<int>() != kManifestVersion) throw FormatError("unsupported manifest version");
    LabeledDataset ds;
    ds.config = scenario_from_json(m.at("config"));
    ds.topology = load_topology(dir / m.at("topology_file").get<std::string>());
    const auto n = m.at("n").get<std::size_t>();
    const auto steps = m.at("N").get<std::size_t>();
    const auto count = m.at("count").get<std::size_t>();
    if (n != ds.topology.size()) throw FormatError("manifest bus count differs from topology file");
    ds.samples = decode_samples(read_file(dir / m.at("samples_file").get<std::string>()), steps, n, count);
    if (!m.at("snr_db").is_null()) ds.snr_db = m.at("snr_db").get<double>();
    ds.noise_seed = m.at("noise_seed").get<std::uint64_t>();
    ds.topology_changes = m.at("topology_changes").get<int>();
    for (const auto& p : m.at("provenance")) {
      ds.provenance.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>(), p.at(2).get<double>()});
    }
    return ds;
  } catch (const json::exception& e) {
    throw FormatError("manifest: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Checkpoint

std::string encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& p : ck.params.all()) tensors.emplace_back(p.name, &p.value);
  const Tensor norm_mean({3}, {ck.norm.mean[0], ck.norm.mean[1], ck.norm.mean[2]});
  const Tensor norm_scale({3}, {ck.norm.scale[0], ck.norm.scale[1], ck.norm.scale[2]});
  tensors.emplace_back("norm.mean", &norm_mean);
  tensors.emplace_back("norm.scale", &norm_scale);
  if (ck.adam) {
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      tensors.emplace_back("adam.m." + ck.params.all()[i].name, &ck.adam->m.at(i));
      tensors.emplace_back("adam.v." + ck.params.all()[i].name, &ck.adam->v.at(i));
    }
  }

  json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["model"] = model_to_json(ck.model);
  header["seed"] = ck.seed;
  header["epochs_done"] = ck.epochs_done;
  header["param_count"] = ck.params.size();
  header["adam_step"] = ck.adam ? json(ck.adam->step) : json(nullptr);
  json table = json::array();
  for (const auto& [name, t] : tensors) table.push_back({{"name", name}, {"shape", t->shape()}});
  header["tensors"] = table;
  const std::string head = header.dump();

  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u32(out, Checkpoint::kFormatVersion);
  put_u64(out, head.size());
  out += head;
  for (const auto& [name, t] : tensors) {
    for (double v : t->data()) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw FormatError("not a checkpoint file");
  }
  const auto version = r.u32();
  if (version != Checkpoint::kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  json header;
  try {
    header = json::parse(r.take(r.u64()));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  }
  try {
    Checkpoint ck;
    ck.model = model_from_json(header.at("model"));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.epochs_done = header.at("epochs_done").get<int>();
    const auto param_count = header.at("param_count").get<std::size_t>();
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      std::vector<double> v(shape_size(shape));
      for (auto& x : v) x = r.f64();
      tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(v)));
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
    if (tensors.size() < param_count + 2) throw FormatError("checkpoint is missing tensors");

    std::vector<Parameter> params;
    for (std::size_t i = 0; i < param_count; ++i) params.emplace_back(tensors[i].first, tensors[i].second);
    ck.params = ModelParams::from_parameters(std::move(params));
    const auto& mean = tensors[param_count].second;
    const auto& scale = tensors[param_count + 1].second;
    if (tensors[param_count].first != "norm.mean" || tensors[param_count + 1].first != "norm.scale" ||
        mean.size() != 3 || scale.size() != 3) {
      throw FormatError("checkpoint normalization statistics are malformed");
    }
    for (std::size_t c = 0; c < 3; ++c) {
      ck.norm.mean[c] = mean[c];
      ck.norm.scale[c] = scale[c];
    }
    if (!header.at("adam_step").is_null()) {
      AdamState adam;
      adam.step = header.at("adam_step").get<std::int64_t>();
      if (tensors.size() != param_count + 2 + 2 * param_count) throw FormatError("checkpoint Adam state is incomplete");
      for (std::size_t i = 0; i < param_count; ++i) {
        adam.m.push_back(tensors[param_count + 2 + 2 * i].second);
        adam.v.push_back(tensors[param_count + 3 + 2 * i].second);
      }
      ck.adam = std::move(adam);
    }
    if (ck.params.scalar_count() != ModelParams::expected_scalar_count(ck.model)) {
      throw FormatError("checkpoint parameters do not match its model config");
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  }
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
  write_file_atomic(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_csv(const Metrics& metrics) {
  std::ostringstream os;
  os << "epoch,loss,train_acc,test_acc,seconds\n";
  for (const auto& e : metrics.history) {
    os << e.epoch << ',' << format_double(e.loss) << ',' << format_double(e.train_acc) << ','
       << format_double(e.test_acc) << ',' << format_double(e.seconds) << '\n';
  }
  return os.str();
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,loss,train_acc,test_acc,seconds") {
    throw FormatError("metrics CSV header mismatch");
  }
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw FormatError("metrics CSV row needs 5 fields: " + line);
    EpochMetrics e;
    e.epoch = std::stoi(fields[0]);
    e.loss = std::strtod(fields[1].c_str(), nullptr);
    e.train_acc = std::strtod(fields[2].c_str(), nullptr);
    e.test_acc = std::strtod(fields[3].c_str(), nullptr);
    e.seconds = std::strtod(fields[4].c_str(), nullptr);
    out.push_back(e);
  }
  return out;
}

std::string metrics_json(const Metrics& metrics, const std::string& extra_json) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json j = json::parse(extra_json);
  json hist = json::array();
  for (const auto& e : metrics.history) {
    hist.push_back({{"epoch", e.epoch},
                    {"loss", num(e.loss)},
                    {"train_acc", num(e.train_acc)},
                    {"test_acc", num(e.test_acc)},
                    {"seconds", num(e.seconds)}});
  }
  j["history"] = hist;
  const auto& c = metrics.confusion;
  j["confusion"] = {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}};
  j["accuracy"] = c.accuracy();
  if (!metrics.history.empty()) j["final_loss"] = num(metrics.history.back().loss);
  return j.dump(2) + "\n";
}

}  // namespace stgcn::io
