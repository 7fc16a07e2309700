#include "kkl/cli/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "kkl/error.hpp"

namespace kkl::cli {

namespace fs = std::filesystem;

Json default_config(const std::string& system) {
  const SystemSpec spec = system_by_name(system);
  const TrainConfig t;
  Json j;
  j["system"] = system;
  j["seed"] = 0;
  j["matrices"] = Json{{"a_diag", nullptr}};
  j["net"] = Json{{"hidden", spec.hidden}, {"hidden_layers", 3}, {"gru_hidden", 64}, {"omega", 100},
                  {"ell_dim", 16},        {"phi_hidden", 64},   {"backbone", 128},  {"embed", 16},
                  {"rank", 4},            {"s_init", 0.01}};
  j["train"] = Json{{"n_traj", t.n_traj},
                    {"n_inp", t.n_inp},
                    {"horizon", t.horizon},
                    {"dt", t.dt},
                    {"epochs_a", t.epochs_a},
                    {"epochs_b", t.epochs_b},
                    {"epochs", t.epochs},
                    {"batch", t.batch},
                    {"batches_per_epoch", t.batches_per_epoch},
                    {"lr_phase1", t.lr_phase1},
                    {"lr", t.lr},
                    {"lr_min", t.lr_min},
                    {"clip", t.clip},
                    {"nu_max", t.nu_max},
                    {"warmup_epochs", t.warmup_epochs},
                    {"lambda_pde", t.lambda_pde},
                    {"plateau_factor", t.plateau_factor},
                    {"plateau_patience", t.plateau_patience},
                    {"plateau_min_lr", t.plateau_min_lr},
                    {"spectral_norm", t.spectral_norm}};
  j["stages"] = Json{{"phase1", Json::object()}, {"obs", Json::object()}, {"dyn", Json::object()},
                     {"curriculum", Json::object()}};
  j["eval"] = Json{{"n_trials", 100},
                   {"sigma2", 0.01},
                   {"t_skip", 5.0},
                   {"regimes", {"zero", "constant", "sinusoid", "square"}},
                   {"variants", {"autonomous", "obs", "dyn", "curriculum"}},
                   {"bound_variants", {"autonomous", "obs", "dyn", "curriculum"}},
                   {"grid_per_axis", spec.n_x >= 3 ? 20 : 50},
                   {"input_levels", 16},
                   {"bound_regime", "zero"},
                   {"bound_trials", 50},
                   {"bound_stride", 10},
                   {"w_bar", 0.3},
                   {"v_bar", 0.3}};
  return j;
}

namespace {

bool is_stage_path(const std::string& path) { return path.rfind("stages.", 0) == 0 && path.find('.', 7) == std::string::npos; }

/// Overlays src on dst; every key must already exist (stage objects accept "train" keys).
void strict_merge(Json& dst, const Json& src, const std::string& path, const Json& train_keys) {
  if (!src.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [k, v] : src.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (is_stage_path(path)) {
      if (!train_keys.contains(k)) throw ConfigError("unknown training key '" + p + "'");
      dst[k] = v;
      continue;
    }
    if (!dst.contains(k)) throw ConfigError("unknown config key '" + p + "'");
    if (dst[k].is_object())
      strict_merge(dst[k], v, p, train_keys);
    else
      dst[k] = v;
  }
}

template <class T>
T get(const Json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' is missing or has the wrong type");
  }
}

TrainConfig train_from_json(const Json& j, std::uint64_t seed) {
  const std::string s = "train";
  TrainConfig t;
  t.n_traj = get<std::size_t>(j, "n_traj", s);
  t.n_inp = get<std::size_t>(j, "n_inp", s);
  t.horizon = get<double>(j, "horizon", s);
  t.dt = get<double>(j, "dt", s);
  t.epochs_a = get<std::size_t>(j, "epochs_a", s);
  t.epochs_b = get<std::size_t>(j, "epochs_b", s);
  t.epochs = get<std::size_t>(j, "epochs", s);
  t.batch = get<std::size_t>(j, "batch", s);
  t.batches_per_epoch = get<std::size_t>(j, "batches_per_epoch", s);
  t.lr_phase1 = get<double>(j, "lr_phase1", s);
  t.lr = get<double>(j, "lr", s);
  t.lr_min = get<double>(j, "lr_min", s);
  t.clip = get<double>(j, "clip", s);
  t.nu_max = get<double>(j, "nu_max", s);
  t.warmup_epochs = get<std::size_t>(j, "warmup_epochs", s);
  t.lambda_pde = get<double>(j, "lambda_pde", s);
  t.plateau_factor = get<double>(j, "plateau_factor", s);
  t.plateau_patience = get<std::size_t>(j, "plateau_patience", s);
  t.plateau_min_lr = get<double>(j, "plateau_min_lr", s);
  t.spectral_norm = get<bool>(j, "spectral_norm", s);
  t.seed = seed;
  t.validate();
  return t;
}

std::vector<Variant> variants_from(const Json& j, const char* key) {
  std::vector<Variant> out;
  for (const auto& s : get<std::vector<std::string>>(j, key, "eval")) {
    try {
      out.push_back(parse_variant(s));
    } catch (const Error&) {
      throw ConfigError("unknown variant '" + s + "' in eval." + key);
    }
  }
  return out;
}

}  // namespace

TrainConfig RunConfig::stage(const std::string& name) const {
  if (!doc.at("stages").contains(name)) throw ConfigError("unknown training stage '" + name + "'");
  Json t = doc.at("train");
  t.update(doc.at("stages").at(name));
  return train_from_json(t, seed);
}

void apply_set(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  // Build a one-key patch and merge it strictly.
  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  Json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  strict_merge(doc, patch, "", doc.at("train"));
}

RunConfig parse_config(const Json& doc) {
  RunConfig rc;
  rc.doc = doc;
  const auto system = get<std::string>(doc, "system", "");
  rc.spec = system_by_name(system);
  rc.seed = get<std::uint64_t>(doc, "seed", "");

  const Json& m = doc.at("matrices");
  if (m.at("a_diag").is_null()) {
    rc.mats = build_matrices(rc.spec.n_x, rc.spec.n_y);
  } else {
    const auto a = get<std::vector<double>>(m, "a_diag", "matrices");
    if (a.empty()) throw ConfigError("matrices.a_diag must not be empty");
    rc.mats = diagonal_matrices(a, rc.spec.n_y);
  }
  const auto rep = check_matrices(rc.mats);
  if (!rep.hurwitz) throw ConfigError("observer matrix A is not Hurwitz");
  if (!rep.controllable) throw ConfigError("observer pair (A, B) is not controllable");

  const Json& n = doc.at("net");
  const std::string ns = "net";
  rc.net.n_x = rc.spec.n_x;
  rc.net.n_u = rc.spec.n_u;
  rc.net.n_z = rc.mats.n_z();
  rc.net.hidden = get<std::size_t>(n, "hidden", ns);
  rc.net.hidden_layers = get<std::size_t>(n, "hidden_layers", ns);
  rc.net.gru_hidden = get<std::size_t>(n, "gru_hidden", ns);
  rc.net.omega = get<std::size_t>(n, "omega", ns);
  rc.net.ell_dim = get<std::size_t>(n, "ell_dim", ns);
  rc.net.phi_hidden = get<std::size_t>(n, "phi_hidden", ns);
  rc.net.backbone = get<std::size_t>(n, "backbone", ns);
  rc.net.embed = get<std::size_t>(n, "embed", ns);
  rc.net.rank = get<std::size_t>(n, "rank", ns);
  rc.net.s_init = get<double>(n, "s_init", ns);
  if (rc.net.omega == 0 || rc.net.hidden == 0) throw ConfigError("net.omega and net.hidden must be positive");

  rc.train = train_from_json(doc.at("train"), rc.seed);
  for (const auto& [name, patch] : doc.at("stages").items()) (void)rc.stage(name);

  const Json& e = doc.at("eval");
  const std::string es = "eval";
  rc.eval.n_trials = get<std::size_t>(e, "n_trials", es);
  rc.eval.sigma2 = get<double>(e, "sigma2", es);
  rc.eval.t_skip = get<double>(e, "t_skip", es);
  rc.eval.horizon = rc.train.horizon;
  rc.eval.dt = rc.train.dt;
  rc.eval.seed = rc.seed;
  rc.eval.regimes.clear();
  for (const auto& s : get<std::vector<std::string>>(e, "regimes", es)) rc.eval.regimes.push_back(parse_kind(s));
  rc.variants = variants_from(e, "variants");
  rc.bound_variants = variants_from(e, "bound_variants");
  rc.grid_per_axis = get<std::size_t>(e, "grid_per_axis", es);
  rc.input_levels = get<std::size_t>(e, "input_levels", es);
  rc.bound_regime = parse_kind(get<std::string>(e, "bound_regime", es));
  rc.bound_trials = get<std::size_t>(e, "bound_trials", es);
  rc.bound_stride = get<std::size_t>(e, "bound_stride", es);
  rc.w_bar = get<double>(e, "w_bar", es);
  rc.v_bar = get<double>(e, "v_bar", es);
  if (rc.eval.n_trials == 0 || rc.bound_trials == 0 || rc.bound_stride == 0)
    throw ConfigError("trial counts and bound_stride must be positive");
  if (rc.eval.sigma2 < 0.0 || rc.eval.t_skip < 0.0 || rc.eval.t_skip >= rc.eval.horizon)
    throw ConfigError("eval.sigma2 must be >= 0 and eval.t_skip must lie in [0, horizon)");
  return rc;
}

RunConfig resolve_config(const std::optional<std::string>& config_path, const std::vector<std::string>& sets,
                         const std::optional<std::uint64_t>& seed) {
  Json file = Json::object();
  if (config_path) {
    std::ifstream is(*config_path);
    if (!is) throw ConfigError("cannot read config '" + *config_path + "'");
    try {
      file = Json::parse(is);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config '" + *config_path + "' is not valid JSON: " + e.what());
    }
  }
  // the system picks the defaults, so find it first
  std::string system = file.value("system", std::string("duffing"));
  for (const auto& s : sets)
    if (s.rfind("system=", 0) == 0) system = s.substr(7);
  Json doc = default_config(system);
  strict_merge(doc, file, "", doc.at("train"));
  for (const auto& s : sets) apply_set(doc, s);
  if (seed) doc["seed"] = *seed;
  return parse_config(doc);
}

namespace {

struct Paths {
  fs::path out;
  std::string autonomous() const { return (out / "data" / "autonomous.kds").string(); }
  std::string forced() const { return (out / "data" / "forced.kds").string(); }
  std::string ckpt(Variant v) const {
    return (out / "ckpt" / (v == Variant::Autonomous ? "phase1.ckpt" : std::string(variant_name(v)) + ".ckpt")).string();
  }
  std::string metrics(const std::string& stage) const { return (out / "metrics" / (stage + ".jsonl")).string(); }
};

void log(const std::string& msg) { std::cerr << "[kkl] " << msg << '\n'; }

/// The subset of the config a dataset depends on.
Json data_key(const Json& doc) {
  const Json& t = doc.at("train");
  return Json{{"system", doc.at("system")}, {"seed", doc.at("seed")},  {"matrices", doc.at("matrices")},
              {"omega", doc.at("net").at("omega")}, {"n_traj", t.at("n_traj")}, {"n_inp", t.at("n_inp")},
              {"horizon", t.at("horizon")}, {"dt", t.at("dt")}};
}

void check_same_data(const io::Container& c, const RunConfig& rc, const std::string& path) {
  if (data_key(c.manifest.at("config")) != data_key(rc.doc))
    throw ConfigError(path + " was generated with a different configuration; rerun gen-data");
}

void check_same_system(const ModelBundle& b, const RunConfig& rc, const std::string& path) {
  if (b.system != rc.spec.name || b.net.n_z != rc.net.n_z || b.net.omega != rc.net.omega ||
      b.net.hidden != rc.net.hidden || b.net.hidden_layers != rc.net.hidden_layers)
    throw ConfigError(path + " does not match the configured system or network");
}

/// JSON-lines metrics log; also remembers the last record per stage.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path) {
    fs::create_directories(fs::path(path).parent_path());
    os_.open(path, std::ios::trunc);
    if (!os_) throw Error("cannot open '" + path + "'");
  }
  MetricsSink sink() {
    return [this](const EpochMetrics& m) {
      Json j;
      j["stage"] = m.stage;
      j["epoch"] = m.epoch;
      for (const auto& [k, v] : m.terms) j[k] = v;
      j["lr"] = m.lr;
      j["grad_norm"] = m.grad_norm;
      j["wall_ms"] = m.wall_ms;
      os_ << j.dump() << '\n';
      j.erase("wall_ms");
      last_[m.stage] = j;
    };
  }
  Json summary() const { return last_; }

 private:
  std::ofstream os_;
  Json last_ = Json::object();
};

ModelBundle load_bundle(const Paths& p, Variant v, const RunConfig& rc, bool base = false) {
  const std::string path = p.ckpt(v);
  if (!fs::exists(path)) {
    if (base) throw MissingPrerequisite("missing base checkpoint: " + path + " (run train-phase1 first)");
    throw MissingPrerequisite("missing checkpoint: " + path);
  }
  ModelBundle b = io::bundle_of(io::load_container(path, io::kCheckpointMagic));
  check_same_system(b, rc, path);
  b.variant = v;
  return b;
}

void save_bundle(const Paths& p, const ModelBundle& b, const RunConfig& rc, const Json& metrics) {
  auto c = io::checkpoint_of(b, rc.doc, metrics);
  io::save_container(p.ckpt(b.variant), io::kCheckpointMagic, c);
  log("wrote " + p.ckpt(b.variant));
}

ModelBundle new_bundle(Variant v, const RunConfig& rc) {
  ModelBundle b;
  b.variant = v;
  b.system = rc.spec.name;
  b.net = rc.net;
  b.mats = rc.mats;
  b.dt = rc.train.dt;
  return b;
}

TensorMap with_prefixes(const TensorMap& all, std::initializer_list<const char*> prefixes) {
  TensorMap out;
  for (const char* pre : prefixes)
    for (const auto& n : names_with_prefix(all, pre)) out.emplace(n, all.at(n));
  return out;
}

ForcedDataset load_forced(const Paths& p, const RunConfig& rc) {
  const auto c = io::load_container(p.forced(), io::kDatasetMagic);
  check_same_data(c, rc, p.forced());
  return io::forced_of(c);
}

void cmd_gen_data(const RunConfig& rc, const Paths& p) {
  Rng ra = Rng(rc.seed).derive(1);
  const auto auton = build_autonomous_dataset(rc.spec, rc.mats, rc.train, ra);
  auto ca = io::dataset_container(auton, rc.doc);
  io::save_container(p.autonomous(), io::kDatasetMagic, ca);
  log("wrote " + p.autonomous() + " (" + std::to_string(auton.size()) + " samples)");
  Rng rf = Rng(rc.seed).derive(2);
  const auto forced = build_forced_dataset(rc.spec, rc.mats, rc.train, rc.net.omega, rf);
  auto cf = io::dataset_container(forced, rc.doc);
  io::save_container(p.forced(), io::kDatasetMagic, cf);
  log("wrote " + p.forced() + " (" + std::to_string(forced.size()) + " samples)");
}

void cmd_phase1(const RunConfig& rc, const Paths& p) {
  const auto c = io::load_container(p.autonomous(), io::kDatasetMagic);
  check_same_data(c, rc, p.autonomous());
  const auto data = io::autonomous_of(c);
  MetricsLog ml(p.metrics("phase1"));
  auto b = new_bundle(Variant::Autonomous, rc);
  b.params = train_phase1(rc.net, rc.mats, data, rc.stage("phase1"), ml.sink());
  save_bundle(p, b, rc, ml.summary());
}

void cmd_obs(const RunConfig& rc, const Paths& p) {
  const auto base = load_bundle(p, Variant::Autonomous, rc, true);
  const auto data = load_forced(p, rc);
  const auto cfg = rc.stage("obs");
  MetricsLog ml(p.metrics("obs"));
  const TensorMap inj = train_obs(rc.net, rc.mats, base.params, data, cfg, ml.sink());
  auto b = new_bundle(Variant::Obs, rc);
  b.params = with_prefixes(base.params, {"enc.", "dec."});
  for (const auto& [k, v] : inj) b.params.emplace(k, v);

  // Training-set mismatch with and without the injection term on a fixed subset.
  std::vector<std::size_t> idx;
  const std::size_t stride = std::max<std::size_t>(1, data.size() / 4096);
  for (std::size_t i = 0; i < data.size(); i += stride) idx.push_back(i);
  Matrix xs(static_cast<Eigen::Index>(idx.size()), data.x.cols()), xd(xs.rows(), data.x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    xs.row(static_cast<Eigen::Index>(r)) = data.x.row(static_cast<Eigen::Index>(idx[r]));
    xd.row(static_cast<Eigen::Index>(r)) = data.xdot.row(static_cast<Eigen::Index>(idx[r]));
  }
  Matrix z, zdot;
  encode_with_tangent(rc.net, base.params, xs, xd, z, zdot);
  // obs_dataset_loss indexes z by sample, so scatter back to full-size rows
  Matrix zf = Matrix::Zero(static_cast<Eigen::Index>(data.size()), z.cols()), zdf = zf;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    zf.row(static_cast<Eigen::Index>(idx[r])) = z.row(static_cast<Eigen::Index>(r));
    zdf.row(static_cast<Eigen::Index>(idx[r])) = zdot.row(static_cast<Eigen::Index>(r));
  }
  Json summary = ml.summary();
  summary["aug_subset"] = obs_dataset_loss(rc.net, rc.mats, b.params, data, idx, zf, zdf);
  summary["aug_zero_injection_subset"] = obs_dataset_loss(rc.net, rc.mats, b.params, data, idx, zf, zdf, true);
  save_bundle(p, b, rc, summary);
}

void cmd_dyn(const RunConfig& rc, const Paths& p) {
  const auto base = load_bundle(p, Variant::Autonomous, rc, true);
  const auto data = load_forced(p, rc);
  MetricsLog ml(p.metrics("dyn"));
  const TensorMap hyp = train_dyn(rc.net, rc.mats, base.params, data, rc.stage("dyn"), ml.sink());
  auto b = new_bundle(Variant::Dyn, rc);
  b.params = with_prefixes(base.params, {"enc.", "dec."});
  for (const auto& [k, v] : hyp) b.params.emplace(k, v);
  save_bundle(p, b, rc, ml.summary());
}

void cmd_curriculum(const RunConfig& rc, const Paths& p) {
  const auto base = load_bundle(p, Variant::Autonomous, rc, true);
  const auto data = load_forced(p, rc);
  MetricsLog ml(p.metrics("curriculum"));
  auto b = new_bundle(Variant::Curriculum, rc);
  b.params = train_curriculum(rc.net, rc.mats, base.params, data, rc.stage("curriculum"), ml.sink());
  save_bundle(p, b, rc, ml.summary());
}

std::vector<std::string> preamble(const RunConfig& rc) {
  return {"config " + rc.doc.dump(),
          "seed " + std::to_string(rc.seed) + ", t_skip " + Json(rc.eval.t_skip).dump() + ", trials " +
              std::to_string(rc.eval.n_trials),
          "smape = 100 * mean 2|x - xh| / max(|x| + |xh|, 1e-8); divergent trials scored 200"};
}

void cmd_evaluate(const RunConfig& rc, const Paths& p) {
  std::vector<ModelBundle> bundles;
  for (auto v : rc.variants) bundles.push_back(load_bundle(p, v, rc, v == Variant::Autonomous));
  const auto rep = run_benchmark(bundles, rc.spec, rc.eval);
  fs::create_directories(p.out / "eval");
  {
    std::ofstream os(p.out / "eval" / "report.csv", std::ios::trunc);
    write_table_csv(os, std::span(&rep, 1), preamble(rc));
  }
  Json j = Json::parse(report_json(rep));
  j["config"] = rc.doc;
  io::write_file((p.out / "eval" / "report.json").string(), j.dump(2) + "\n");
  for (auto v : rep.variants) {
    std::ostringstream line;
    line << variant_name(v) << ':';
    for (auto k : rep.regimes) line << ' ' << kind_name(k) << '=' << rep.mean(v, k);
    log(line.str());
  }
  log("wrote " + (p.out / "eval" / "report.csv").string());
}

Json constants_json(const BoundConstants& c) {
  return Json{{"kappa", c.kappa},   {"lambda", c.lambda},   {"eps_pde", c.eps_pde}, {"eps_rt", c.eps_rt},
              {"ell_dec", c.ell_dec}, {"ell_enc", c.ell_enc}, {"B_norm", c.B_norm}, {"w_bar", c.w_bar},
              {"v_bar", c.v_bar}};
}

void cmd_bound(const RunConfig& rc, const Paths& p) {
  BenchmarkConfig bc = rc.eval;
  bc.n_trials = rc.bound_trials;
  const auto ts = make_test_set(rc.spec, rc.bound_regime, bc, false);
  const std::size_t stride = rc.bound_stride;

  Json out;
  out["config"] = rc.doc;
  out["regime"] = kind_name(rc.bound_regime);
  out["t_skip"] = rc.eval.t_skip;
  out["note"] = "eps_enc and eps_dec are replaced by the round-trip sup eps_rt in the decoder slot";
  out["variants"] = Json::object();
  for (auto v : rc.bound_variants) {
    const auto b = load_bundle(p, v, rc, v == Variant::Autonomous);
    const auto est = run_observer_batch(b, ts.measured, Vector::Zero(static_cast<Eigen::Index>(b.net.n_z)));

    ConstantGrid grid;
    const Matrix lat = lattice(rc.spec, rc.grid_per_axis);
    std::vector<Vector> visited, latent;
    for (std::size_t i = 0; i < ts.truth.size(); ++i)
      for (std::size_t k = 0; k < ts.truth[i].times.size(); k += stride) {
        visited.push_back(ts.truth[i].states.row(static_cast<Eigen::Index>(k)).transpose());
        if (!est[i].diverged) latent.push_back(est[i].z.row(static_cast<Eigen::Index>(k)).transpose());
      }
    grid.states.resize(lat.rows() + static_cast<Eigen::Index>(visited.size()), lat.cols());
    grid.states.topRows(lat.rows()) = lat;
    for (std::size_t r = 0; r < visited.size(); ++r) grid.states.row(lat.rows() + static_cast<Eigen::Index>(r)) = visited[r].transpose();
    grid.latent.resize(static_cast<Eigen::Index>(latent.size()), static_cast<Eigen::Index>(b.net.n_z));
    for (std::size_t r = 0; r < latent.size(); ++r) grid.latent.row(static_cast<Eigen::Index>(r)) = latent[r].transpose();
    grid.inputs = rc.bound_regime == InputKind::Zero ? std::vector<double>{0.0} : input_levels(rc.input_levels);

    const auto c = estimate_constants(b, rc.spec, grid, rc.w_bar, rc.v_bar);
    const auto chk = check_bound(b, c, ts.truth, est, rc.eval.t_skip);
    Json vj;
    vj["constants"] = constants_json(c);
    vj["asymptotic_bound"] = asymptotic_bound(c);
    vj["noisy_bound"] = noisy_bound(c);
    vj["mean_pde_residual"] = mean_pde_residual(b, rc.spec, grid);
    vj["grid_points"] = grid.states.rows();
    vj["latent_points"] = grid.latent.rows();
    vj["trajectories"] = chk.holds.size();
    vj["fraction_within_bound"] = chk.fraction();
    Json ratios = Json::array();
    for (double r : chk.worst_ratio) ratios.push_back(std::isfinite(r) ? Json(r) : Json(nullptr));
    vj["worst_error_to_bound_ratio"] = ratios;
    out["variants"][std::string(variant_name(v))] = vj;
    log(std::string(variant_name(v)) + ": eps_pde=" + Json(c.eps_pde).dump() + " eps_rt=" + Json(c.eps_rt).dump() +
        " ell_dec=" + Json(c.ell_dec).dump() + " within bound " + Json(chk.fraction()).dump());
  }
  io::write_file((p.out / "bound" / "bound.json").string(), out.dump(2) + "\n");
  log("wrote " + (p.out / "bound" / "bound.json").string());
}

SmapeReport report_from_json(const Json& j) {
  SmapeReport r;
  r.system = j.at("system").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.t_skip = j.at("t_skip").get<double>();
  r.n_trials = j.at("n_trials").get<std::size_t>();
  for (const auto& c : j.at("cells")) {
    const auto v = parse_variant(c.at("variant").get<std::string>());
    const auto k = parse_kind(c.at("regime").get<std::string>());
    if (std::find(r.variants.begin(), r.variants.end(), v) == r.variants.end()) r.variants.push_back(v);
    if (std::find(r.regimes.begin(), r.regimes.end(), k) == r.regimes.end()) r.regimes.push_back(k);
    r.trials[v][k] = c.at("trials").get<std::vector<double>>();
    r.diverged[v][k] = c.at("diverged").get<std::size_t>();
  }
  return r;
}

void cmd_report(const RunConfig& rc, const Paths& p, std::vector<std::string> runs) {
  if (runs.empty()) runs.push_back(p.out.string());
  std::vector<SmapeReport> reps;
  std::vector<std::string> pre{"merged SMAPE table (percent); rows are variants, columns system/regime"};
  for (const auto& dir : runs) {
    const std::string path = (fs::path(dir) / "eval" / "report.json").string();
    Json j;
    try {
      j = Json::parse(io::read_file(path));
      reps.push_back(report_from_json(j));
    } catch (const Json::exception& e) {
      throw FormatError(path + ": " + e.what());
    }
    pre.push_back(reps.back().system + " config " + j.at("config").dump());
  }
  (void)rc;
  fs::create_directories(p.out);
  std::ofstream os(p.out / "report.csv", std::ios::trunc);
  write_table_csv(os, reps, pre);
  log("wrote " + (p.out / "report.csv").string());
}

}  // namespace

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

int run(int argc, const char* const* argv) {
  CLI::App app{"KKL observer toolkit: data generation, training, evaluation and error bounds"};
  app.require_subcommand(1);
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string out = "run";
  std::vector<std::string> runs;
  app.option_defaults()->always_capture_default();
  app.add_option("--config", config_path, "JSON config document");
  app.add_option("--seed", seed, "Run seed (overrides the config)");
  app.add_option("--set", sets, "Override a config key, e.g. --set train.epochs=10")->take_all();
  app.add_option("--out", out, "Output directory");
  app.fallthrough();

  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd cmds[] = {{"gen-data", "Build the autonomous and forced datasets"},
                      {"train-phase1", "Pretrain the base encoder and decoder"},
                      {"train-obs", "Train the latent injection network on a frozen base"},
                      {"train-dyn", "Train the hypernetwork on a frozen base"},
                      {"train-curriculum", "Fine-tune the base maps in input-complexity stages"},
                      {"evaluate", "SMAPE benchmark over variants and input regimes"},
                      {"bound", "Estimate bound constants and check the certificate"},
                      {"report", "Merge evaluation reports of several runs into one table"}};
  for (const auto& c : cmds) {
    auto* sc = app.add_subcommand(c.name, c.help);
    sc->fallthrough();
    if (std::string(c.name) == "report") sc->add_option("runs", runs, "Run directories (default: --out)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    const RunConfig rc = resolve_config(config_path, sets, seed);
    tune_allocator();
    const Paths p{fs::path(out)};
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-data") cmd_gen_data(rc, p);
    else if (cmd == "train-phase1") cmd_phase1(rc, p);
    else if (cmd == "train-obs") cmd_obs(rc, p);
    else if (cmd == "train-dyn") cmd_dyn(rc, p);
    else if (cmd == "train-curriculum") cmd_curriculum(rc, p);
    else if (cmd == "evaluate") cmd_evaluate(rc, p);
    else if (cmd == "bound") cmd_bound(rc, p);
    else if (cmd == "report") cmd_report(rc, p, runs);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kNumericalAbort;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kMissingPrerequisite;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace kkl::cli
