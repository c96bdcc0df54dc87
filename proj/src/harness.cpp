#include "trajguard/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <cstring>
#include <functional>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "trajguard/optim.hpp"
#include "trajguard/spectrum.hpp"

namespace trajguard::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

unsigned resolve_threads(unsigned threads, std::size_t work) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::max<std::size_t>(1, std::min<std::size_t>(threads, work)));
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  const unsigned t = resolve_threads(threads, n);
  if (t == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(t);
    for (unsigned w = 0; w < t; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

// Runs one offline stage, re-raising failures with the stage name attached.
template <class F>
auto run_stage(const std::string& name, Timings* timings, F&& fn) {
  const auto t0 = Clock::now();
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      if (timings) timings->emplace_back(name, seconds_since(t0));
    } else {
      auto out = fn();
      if (timings) timings->emplace_back(name, seconds_since(t0));
      return out;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

// Every key the given serialisation of the defaults produces is allowed.
void check_keys_like(const json& j, const json& reference, const std::string& where,
                     std::initializer_list<const char*> extra = {}) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (reference.contains(key)) continue;
    if (std::any_of(extra.begin(), extra.end(), [&](const char* a) { return key == a; })) continue;
    throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + "." + key + "': " + e.what());
  }
}

template <class F>
auto wrap_config(const std::string& where, F&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config section '" + where + "': " + e.what());
  }
}

LabeledDataset slice(const LabeledDataset& data, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return data.subset(idx);
}

trajectory::Trajectory stream_trajectory(const model::Network& net, const trajectory::ReducerBank& bank,
                                         std::span<const float> input, std::uint64_t id) {
  trajectory::Trajectory t;
  t.sample_id = id;
  t.layers = bank.ordinals();
  t.values.resize(static_cast<Eigen::Index>(bank.layers().size()), static_cast<Eigen::Index>(bank.target_dim()));
  std::vector<bool> seen(bank.layers().size(), false);
  net.forward_streaming(input, [&](const model::TapPoint& tap, std::span<const float> act) {
    const auto r = bank.row_of(tap.ordinal);
    if (r < 0) return;
    bank.reduce_layer(tap.ordinal, act, {t.values.row(r).data(), bank.target_dim()});
    seen[static_cast<std::size_t>(r)] = true;
  });
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw ShapeError("model did not produce every tap the reducer bank expects");
  }
  return t;
}

json rate_to_json(const Rate& r) {
  const auto v = r.value();
  return {{"total", r.total}, {"flagged", r.flagged}, {"rate", v ? json(*v) : json(nullptr)}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> list_files(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel != "manifest.json") names.push_back(std::move(rel));
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

// ---------------------------------------------------------------- options

void BundleOptions::validate() const {
  if (dim < 1) throw ConfigError("bundle.dim must be at least 1");
  if (!(calibration_fraction >= 0.0 && calibration_fraction < 1.0)) {
    throw ConfigError("bundle.calibration_fraction must lie in [0, 1)");
  }
  if (use_spectrum && !use_codec) throw ConfigError("bundle.use_spectrum needs use_codec (the spectrum is taken of z)");
  if (use_spectrum && codec.bottleneck_dim < 2) throw ConfigError("spectrum needs a bottleneck of at least 2");
  codec.validate();
  detector.validate();
  trajectory::make_sampling_plan(plan, 64);  // name check only
}

json options_to_json(const BundleOptions& o) {
  return {{"plan", o.plan},
          {"reduction", trajectory::to_string(o.reduction)},
          {"dim", o.dim},
          {"codec", codec::config_to_json(o.codec)},
          {"detector", svdd::config_to_json(o.detector)},
          {"calibration_fraction", o.calibration_fraction},
          {"use_codec", o.use_codec},
          {"use_spectrum", o.use_spectrum},
          {"seed", o.seed}};
}

BundleOptions options_from_json(const json& j) {
  const std::string w = "bundle";
  BundleOptions o;
  check_keys_like(j, options_to_json(o), w);
  read(j, "plan", o.plan, w);
  if (j.contains("reduction")) {
    o.reduction = wrap_config(w, [&] { return trajectory::reduction_from_string(j["reduction"].get<std::string>()); });
  }
  read(j, "dim", o.dim, w);
  if (j.contains("codec")) {
    check_keys_like(j["codec"], codec::config_to_json(o.codec), w + ".codec");
    o.codec = wrap_config(w + ".codec", [&] { return codec::config_from_json(j["codec"]); });
  }
  if (j.contains("detector")) {
    check_keys_like(j["detector"], svdd::config_to_json(o.detector), w + ".detector");
    o.detector = wrap_config(w + ".detector", [&] { return svdd::config_from_json(j["detector"]); });
  }
  read(j, "calibration_fraction", o.calibration_fraction, w);
  read(j, "use_codec", o.use_codec, w);
  read(j, "use_spectrum", o.use_spectrum, w);
  read(j, "seed", o.seed, w);
  wrap_config(w, [&] { o.validate(); return 0; });
  return o;
}

// ---------------------------------------------------------------- bundle

Bundle::Bundle(std::shared_ptr<const model::Network> model, BundleOptions options, FrontEnd front,
               svdd::Detector detector)
    : model_(std::move(model)),
      options_(std::move(options)),
      front_(std::move(front)),
      detector_(std::move(detector)) {
  if (!model_) throw ConfigError("bundle needs a model");
  if (detector_.input_dim() != feature_dim()) throw ShapeError("detector input width does not match the features");
}

std::size_t Bundle::feature_dim() const {
  if (!front_.codec) return front_.bank.layers().size() * front_.bank.target_dim();
  const auto n = front_.codec->code_dim();
  return options_.use_spectrum ? spectrum::feature_length(n) : n;
}

trajectory::Trajectory Bundle::trajectory_of(std::span<const float> input, std::uint64_t id) const {
  return stream_trajectory(*model_, front_.bank, input, id);
}

std::vector<float> Bundle::feature(std::span<const float> input) const {
  const auto t = trajectory_of(input);
  if (!front_.codec) return {t.values.data(), t.values.data() + t.values.size()};
  const auto code = front_.codec->encode(t);
  if (!options_.use_spectrum) return code.z;
  const auto mags = spectrum::transform(code).magnitudes;
  return {mags.begin(), mags.end()};
}

double Bundle::score(std::span<const float> input) const { return detector_.score(feature(input)); }

void Bundle::set_verification(MatrixRM inputs, std::vector<double> scores) {
  if (static_cast<std::size_t>(inputs.rows()) != scores.size()) throw ShapeError("verification rows and scores differ");
  verify_inputs_ = std::move(inputs);
  verify_scores_ = std::move(scores);
}

std::size_t Bundle::verify() const {
  std::size_t same = 0;
  for (Eigen::Index i = 0; i < verify_inputs_.rows(); ++i) {
    const double s = score({verify_inputs_.row(i).data(), static_cast<std::size_t>(verify_inputs_.cols())});
    same += std::memcmp(&s, &verify_scores_[static_cast<std::size_t>(i)], sizeof(double)) == 0 ? 1 : 0;
  }
  return same;
}

std::vector<std::vector<float>> map_samples(const LabeledDataset& data, unsigned threads,
                                            const std::function<std::vector<float>(std::span<const float>)>& fn) {
  std::vector<std::vector<float>> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) { out[i] = fn(data.sample(i)); });
  return out;
}

namespace {

MatrixRM stack_rows(const std::vector<std::vector<float>>& rows, std::size_t width) {
  MatrixRM m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != width) throw ShapeError("ragged per-sample output");
    std::copy(rows[i].begin(), rows[i].end(), m.row(static_cast<Eigen::Index>(i)).data());
  }
  return m;
}

MatrixRM flat_of(const model::Network& net, const trajectory::ReducerBank& bank, const LabeledDataset& data,
                 unsigned threads) {
  const auto rows = map_samples(data, threads, [&](std::span<const float> x) {
    const auto t = stream_trajectory(net, bank, x, 0);
    return std::vector<float>(t.values.data(), t.values.data() + t.values.size());
  });
  return stack_rows(rows, bank.layers().size() * bank.target_dim());
}

}  // namespace

MatrixRM flat_trajectories(const Bundle& bundle, const LabeledDataset& data, unsigned threads) {
  return flat_of(bundle.model(), bundle.front().bank, data, threads);
}

std::vector<double> score_all(const Bundle& bundle, const LabeledDataset& data, unsigned threads) {
  std::vector<double> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) { out[i] = bundle.score(data.sample(i)); });
  return out;
}

FrontEnd fit_front_end(const model::Network& net, const LabeledDataset& fit_set, const BundleOptions& options,
                       unsigned threads, Timings* timings) {
  options.validate();
  if (fit_set.shape != net.spec().input_shape) throw ShapeError("fit set shape does not match the model input");
  FrontEnd front;
  front.plan = trajectory::make_sampling_plan(options.plan, static_cast<int>(net.tap_plan().size()));
  front.bank = run_stage("fit_reducers", timings, [&] {
    std::vector<std::size_t> idx(fit_set.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto taps = trajectory::collect_taps(net, model::batch_inputs(fit_set, idx));
    return trajectory::fit_reducers(taps, net.tap_plan(), front.plan, options.dim, options.reduction, options.seed);
  });
  if (options.use_codec) {
    front.codec = run_stage("fit_codec", timings, [&] {
      const MatrixRM flat = flat_of(net, front.bank, fit_set, threads);
      return codec::fit_codec(flat, front.bank.layers().size(), front.bank.target_dim(), options.codec);
    });
  }
  return front;
}

Bundle build_bundle(std::shared_ptr<const model::Network> model, const LabeledDataset& reserved,
                    const BundleOptions& options, unsigned threads, Timings* timings) {
  if (!model) throw ConfigError("build_bundle needs a model");
  if (reserved.split != Split::reserved) {
    throw ConfigError("build_bundle needs the reserved split, got '" + to_string(reserved.split) + "'");
  }
  reserved.validate();
  options.validate();
  const auto& train_ids = model->record().train_ids;  // sorted
  for (auto id : reserved.ids) {
    if (std::binary_search(train_ids.begin(), train_ids.end(), id)) {
      throw ConfigError("reserved sample id " + std::to_string(id) + " was used to train the model");
    }
  }
  const std::size_t n = reserved.size();
  const auto n_cal = static_cast<std::size_t>(std::floor(options.calibration_fraction * static_cast<double>(n) + 0.5));
  if (n < n_cal + 20) throw ConfigError("reserved set too small: " + std::to_string(n) + " samples");
  if (options.calibration_fraction > 0.0 && n_cal == 0) throw ConfigError("calibration slice is empty");
  const LabeledDataset fit_set = slice(reserved, 0, n - n_cal);
  const LabeledDataset cal_set = slice(reserved, n - n_cal, n);

  FrontEnd front = fit_front_end(*model, fit_set, options, threads, timings);

  // The detector is fitted on features produced by the same per-sample path used online.
  const std::size_t feature_dim =
      !options.use_codec ? front.bank.layers().size() * front.bank.target_dim()
      : options.use_spectrum ? spectrum::feature_length(options.codec.bottleneck_dim)
                             : options.codec.bottleneck_dim;
  Bundle partial(model, options, std::move(front), svdd::Detector(options.detector, feature_dim));
  const MatrixRM features = run_stage("transform", timings, [&] {
    const auto rows = map_samples(fit_set, threads, [&](std::span<const float> x) { return partial.feature(x); });
    return stack_rows(rows, partial.feature_dim());
  });
  partial.detector() = run_stage("fit_detector", timings, [&] { return svdd::fit_detector(features, options.detector); });
  run_stage("calibrate", timings, [&] {
    const auto scores = score_all(partial, n_cal > 0 ? cal_set : fit_set, threads);
    partial.detector().calibrate(scores);
  });

  const std::size_t nv = std::min(kVerificationCount, n);
  MatrixRM vin(static_cast<Eigen::Index>(nv), static_cast<Eigen::Index>(reserved.shape.size()));
  std::vector<double> vs(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    const auto x = reserved.sample(i);
    std::copy(x.begin(), x.end(), vin.row(static_cast<Eigen::Index>(i)).data());
    vs[i] = partial.score(x);
  }
  partial.set_verification(std::move(vin), std::move(vs));

  auto& m = partial.manifest();
  m["format"] = "trajguard-bundle/1";
  m["options"] = options_to_json(options);
  m["plan"] = {{"name", partial.front().plan.name}, {"layers", partial.front().plan.layers}};
  m["reserved_count"] = n;
  m["fit_count"] = fit_set.size();
  m["calibration_count"] = n_cal;
  m["reserved_first_id"] = reserved.ids.empty() ? 0 : reserved.ids.front();
  m["feature_dim"] = partial.feature_dim();
  m["spectrum_convention"] = options.use_spectrum ? spectrum::kConvention : "none";
  m["threshold"] = partial.detector().threshold();
  m["preset_frr"] = partial.detector().preset_frr();
  m["trajectory_dim"] = partial.front().bank.target_dim();
  m["trajectory_dim_capped"] = partial.front().bank.dim_capped();
  m["model_train_samples"] = train_ids.size();
  return partial;
}

void save_bundle(const fs::path& dir, const Bundle& bundle) {
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  model::save_checkpoint(dir / "model", bundle.model());
  trajectory::save_bank(dir / "bank", bundle.front().bank);
  if (bundle.front().codec) codec::save_codec(dir / "codec", *bundle.front().codec);
  svdd::save_detector(dir / "detector", bundle.detector());
  const auto& vin = bundle.verification_inputs();
  io::write_f32(dir / "verification_inputs.bin", {vin.data(), static_cast<std::size_t>(vin.size())});
  json m = bundle.manifest();
  m["verification"] = {{"count", vin.rows()},
                       {"input_size", vin.cols()},
                       {"inputs", "verification_inputs.bin"},
                       {"scores", bundle.verification_scores()}};
  m["files"] = list_files(dir);
  m["sha256"] = io::sha256_files(dir, m["files"].get<std::vector<std::string>>());
  io::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Bundle load_bundle(const fs::path& dir) {
  json m;
  try {
    m = json::parse(io::read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw StageError("load_bundle", std::string("unreadable manifest: ") + e.what());
  }
  return run_stage("load_bundle", nullptr, [&] {
    const auto files = m.at("files").get<std::vector<std::string>>();
    if (io::sha256_files(dir, files) != m.at("sha256").get<std::string>()) {
      throw Error("bundle files do not match the manifest hash");
    }
    const auto options = options_from_json(m.at("options"));
    auto net = std::make_shared<const model::Network>(model::load_checkpoint(dir / "model"));
    FrontEnd front;
    front.bank = trajectory::load_bank(dir / "bank");
    front.plan.name = m.at("plan").at("name").get<std::string>();
    front.plan.layers = m.at("plan").at("layers").get<std::vector<int>>();
    if (options.use_codec) front.codec = codec::load_codec(dir / "codec");
    Bundle b(net, options, std::move(front), svdd::load_detector(dir / "detector"));
    const auto& v = m.at("verification");
    const auto count = v.at("count").get<std::size_t>();
    const auto width = v.at("input_size").get<std::size_t>();
    const auto raw = io::read_f32(dir / v.at("inputs").get<std::string>(), count * width);
    b.set_verification(Eigen::Map<const MatrixRM>(raw.data(), static_cast<Eigen::Index>(count),
                                                  static_cast<Eigen::Index>(width)),
                       v.at("scores").get<std::vector<double>>());
    m.erase("verification");
    m.erase("files");
    m.erase("sha256");
    b.manifest() = m;
    const auto same = b.verify();
    if (same != count) {
      throw Error("only " + std::to_string(same) + " of " + std::to_string(count) +
                  " verification scores reproduce after loading");
    }
    return b;
  });
}

// ---------------------------------------------------------------- detection

std::string to_string(Truth t) {
  switch (t) {
    case Truth::benign: return "benign";
    case Truth::ae: return "ae";
    case Truth::trigger: return "trigger";
  }
  return "?";
}

Truth truth_from_string(const std::string& s) {
  if (s == "benign") return Truth::benign;
  if (s == "ae") return Truth::ae;
  if (s == "trigger") return Truth::trigger;
  throw ConfigError("unknown truth tag '" + s + "' (benign, ae, trigger)");
}

std::optional<double> Rate::value() const {
  if (total == 0) return std::nullopt;
  return static_cast<double>(flagged) / static_cast<double>(total);
}

std::optional<double> Metrics::detection(const std::string& method) const {
  const auto it = attacks.find(method);
  if (it == attacks.end()) return std::nullopt;
  return it->second.value();
}

Metrics compute_metrics(std::span<const Row> rows) {
  Metrics m;
  for (const auto& r : rows) {
    if (!r.error.empty()) {
      ++m.errors;
      continue;
    }
    Rate& rate = r.truth == Truth::benign ? m.benign : m.attacks[r.method];
    ++rate.total;
    rate.flagged += r.verdict == svdd::Verdict::adversarial ? 1 : 0;
  }
  return m;
}

std::vector<Row> detect(const Bundle& bundle, const LabeledDataset& samples, Truth truth, const std::string& method,
                        unsigned threads) {
  std::vector<Row> rows(samples.size());
  const bool shape_ok = samples.shape == bundle.model().spec().input_shape;
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    Row& r = rows[i];
    r.id = samples.ids.size() == samples.size() ? samples.ids[i] : i;
    r.truth = truth;
    r.method = truth == Truth::benign ? "none" : method;
    if (!shape_ok) {
      r.error = "shape mismatch: sample " + samples.shape.str() + ", model " + bundle.model().spec().input_shape.str();
      return;
    }
    try {
      r.score = bundle.score(samples.sample(i));
      r.verdict = bundle.detector().verdict(r.score);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
  });
  return rows;
}

json report_to_json(const DetectionReport& report, bool with_timings) {
  json j;
  j["config"] = report.config;
  const auto& m = report.metrics;
  json attacks = json::object();
  for (const auto& [name, rate] : m.attacks) attacks[name] = rate_to_json(rate);
  j["metrics"] = {{"online_frr", optional_json(m.online_frr())},
                  {"benign", rate_to_json(m.benign)},
                  {"detection", attacks},
                  {"errors", m.errors},
                  {"cda", optional_json(m.cda)},
                  {"asr", optional_json(m.asr)}};
  json rows = json::array();
  for (const auto& r : report.rows) {
    json row{{"id", r.id}, {"truth", to_string(r.truth)}, {"method", r.method}};
    if (r.error.empty()) {
      row["score"] = r.score;
      row["verdict"] = svdd::to_string(r.verdict);
    } else {
      row["error"] = r.error;
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  if (with_timings) {
    json t = json::object();
    for (const auto& [name, s] : report.timings) t[name] = s;
    j["timings_s"] = std::move(t);
  }
  return j;
}

DetectionReport report_from_json(const json& j) {
  DetectionReport r;
  r.config = j.value("config", json::object());
  for (const auto& row : j.at("rows")) {
    Row x;
    x.id = row.at("id").get<std::uint64_t>();
    x.truth = truth_from_string(row.at("truth").get<std::string>());
    x.method = row.at("method").get<std::string>();
    if (row.contains("error")) {
      x.error = row["error"].get<std::string>();
    } else {
      x.score = row.at("score").get<double>();
      x.verdict = row.at("verdict").get<std::string>() == "adversarial" ? svdd::Verdict::adversarial
                                                                        : svdd::Verdict::benign;
    }
    r.rows.push_back(std::move(x));
  }
  r.metrics = compute_metrics(r.rows);
  const auto& mj = j.value("metrics", json::object());
  if (mj.contains("cda") && !mj["cda"].is_null()) r.metrics.cda = mj["cda"].get<double>();
  if (mj.contains("asr") && !mj["asr"].is_null()) r.metrics.asr = mj["asr"].get<double>();
  if (j.contains("timings_s")) {
    for (const auto& [k, v] : j["timings_s"].items()) r.timings.emplace_back(k, v.get<double>());
  }
  return r;
}

std::string rows_to_csv(std::span<const Row> rows) {
  std::ostringstream out;
  out << "id,truth,method,score,verdict,error\n";
  for (const auto& r : rows) {
    out << r.id << ',' << to_string(r.truth) << ',' << r.method << ',';
    if (r.error.empty()) {
      out << fmt_double(r.score) << ',' << svdd::to_string(r.verdict) << ",\n";
    } else {
      std::string e = r.error;
      std::replace(e.begin(), e.end(), '"', '\'');
      out << ",,\"" << e << "\"\n";
    }
  }
  return out.str();
}

std::string metrics_to_csv(const Metrics& m) {
  std::ostringstream out;
  auto val = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string("undefined"); };
  out << "group,total,flagged,rate\n";
  out << "benign(online_frr)," << m.benign.total << ',' << m.benign.flagged << ',' << val(m.benign.value()) << '\n';
  for (const auto& [name, r] : m.attacks) {
    out << name << ',' << r.total << ',' << r.flagged << ',' << val(r.value()) << '\n';
  }
  out << "cda,,," << val(m.cda) << '\n';
  out << "asr,,," << val(m.asr) << '\n';
  return out.str();
}

// ---------------------------------------------------------------- experiment config

ExperimentConfig::ExperimentConfig() {
  training.epochs = 3;
  training.seed = 3;
  poison.trigger.kind = attack::TriggerKind::patch;
  poison.trigger.target_label = 0;
  poison.poison_rate = 0.01;
  poison.seed = 5;
  attacks = {attack::AEConfig::defaults_for(attack::Method::fgsm),
             attack::AEConfig::defaults_for(attack::Method::pgd)};
}

void ExperimentConfig::validate() const {
  if (data.size < 8) throw ConfigError("data.size must be at least 8");
  if (train_count == 0 || test_count == 0) throw ConfigError("train and test splits must be non-empty");
  if (reserved_count < 20) throw ConfigError("reserved_count must be at least 20");
  auto overlap = [](std::uint64_t a, std::size_t na, std::uint64_t b, std::size_t nb) {
    return a < b + nb && b < a + na;
  };
  if (overlap(train_first_id, train_count, reserved_first_id, reserved_count) ||
      overlap(train_first_id, train_count, test_first_id, test_count) ||
      overlap(reserved_first_id, reserved_count, test_first_id, test_count)) {
    throw ConfigError("split id ranges overlap");
  }
  if (training.epochs < 1 || training.batch_size < 1 || !(training.lr > 0.0)) {
    throw ConfigError("model training needs epochs >= 1, batch_size >= 1, lr > 0");
  }
  if (!(poison.poison_rate > 0.0 && poison.poison_rate < 1.0)) throw ConfigError("poison.rate must lie in (0, 1)");
  poison.trigger.validate(Shape{1, data.size, data.size});
  for (const auto& a : attacks) a.validate();
  bundle.validate();
  adaptive.constraint.validate();
  if (adaptive.epochs < 1 || adaptive.pairs < 1 || adaptive.batch_size < 1) {
    throw ConfigError("adaptive epochs, pairs and batch_size must be positive");
  }
}

json config_to_json(const ExperimentConfig& c) {
  json attacks = json::array();
  for (const auto& a : c.attacks) attacks.push_back(attack::config_to_json(a));
  return {
      {"data",
       {{"seed", c.data.seed},
        {"size", c.data.size},
        {"noise_sigma", c.data.noise_sigma},
        {"min_contrast", c.data.min_contrast},
        {"max_contrast", c.data.max_contrast},
        {"jitter", c.data.jitter},
        {"rotation_deg", c.data.rotation_deg},
        {"min_background", c.data.min_background},
        {"max_background", c.data.max_background},
        {"gradient", c.data.gradient}}},
      {"splits",
       {{"train_count", c.train_count},
        {"reserved_count", c.reserved_count},
        {"test_count", c.test_count},
        {"train_first_id", c.train_first_id},
        {"reserved_first_id", c.reserved_first_id},
        {"test_first_id", c.test_first_id}}},
      {"model",
       {{"seed", c.model_seed},
        {"epochs", c.training.epochs},
        {"lr", c.training.lr},
        {"batch_size", c.training.batch_size},
        {"train_seed", c.training.seed},
        {"weight_decay", c.training.weight_decay}}},
      {"poison",
       {{"trigger", attack::trigger_to_json(c.poison.trigger)},
        {"rate", c.poison.poison_rate},
        {"seed", c.poison.seed},
        {"cover_count", c.poison.cover_count ? json(*c.poison.cover_count) : json(nullptr)},
        {"trigger_seed", c.trigger_seed}}},
      {"attacks", {{"methods", attacks}, {"count", c.attack_count}}},
      {"bundle", options_to_json(c.bundle)},
      {"adaptive",
       {{"distance_threshold", c.adaptive.constraint.distance_threshold},
        {"gamma1", c.adaptive.constraint.gamma1},
        {"epochs", c.adaptive.epochs},
        {"lr", c.adaptive.lr},
        {"batch_size", c.adaptive.batch_size},
        {"pairs", c.adaptive.pairs},
        {"surrogate_count", c.adaptive.surrogate_count},
        {"seed", c.adaptive.seed}}},
      {"threads", c.threads}};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, {"data", "splits", "model", "poison", "attacks", "bundle", "adaptive", "threads"}, "");
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, {"seed", "size", "noise_sigma", "min_contrast", "max_contrast", "jitter", "rotation_deg",
                   "min_background", "max_background", "gradient"},
               "data");
    read(d, "seed", c.data.seed, "data");
    read(d, "size", c.data.size, "data");
    read(d, "noise_sigma", c.data.noise_sigma, "data");
    read(d, "min_contrast", c.data.min_contrast, "data");
    read(d, "max_contrast", c.data.max_contrast, "data");
    read(d, "jitter", c.data.jitter, "data");
    read(d, "rotation_deg", c.data.rotation_deg, "data");
    read(d, "min_background", c.data.min_background, "data");
    read(d, "max_background", c.data.max_background, "data");
    read(d, "gradient", c.data.gradient, "data");
  }
  if (j.contains("splits")) {
    const auto& s = j["splits"];
    check_keys(s, {"train_count", "reserved_count", "test_count", "train_first_id", "reserved_first_id",
                   "test_first_id"},
               "splits");
    read(s, "train_count", c.train_count, "splits");
    read(s, "reserved_count", c.reserved_count, "splits");
    read(s, "test_count", c.test_count, "splits");
    read(s, "train_first_id", c.train_first_id, "splits");
    read(s, "reserved_first_id", c.reserved_first_id, "splits");
    read(s, "test_first_id", c.test_first_id, "splits");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"seed", "epochs", "lr", "batch_size", "train_seed", "weight_decay"}, "model");
    read(m, "seed", c.model_seed, "model");
    read(m, "epochs", c.training.epochs, "model");
    read(m, "lr", c.training.lr, "model");
    read(m, "batch_size", c.training.batch_size, "model");
    read(m, "train_seed", c.training.seed, "model");
    read(m, "weight_decay", c.training.weight_decay, "model");
  }
  if (j.contains("poison")) {
    const auto& p = j["poison"];
    check_keys(p, {"trigger", "rate", "seed", "cover_count", "trigger_seed"}, "poison");
    if (p.contains("trigger")) {
      check_keys_like(p["trigger"], attack::trigger_to_json(c.poison.trigger), "poison.trigger");
      c.poison.trigger = wrap_config("poison.trigger", [&] { return attack::trigger_from_json(p["trigger"]); });
    }
    read(p, "rate", c.poison.poison_rate, "poison");
    read(p, "seed", c.poison.seed, "poison");
    read(p, "trigger_seed", c.trigger_seed, "poison");
    if (p.contains("cover_count") && !p["cover_count"].is_null()) {
      std::size_t n = 0;
      read(p, "cover_count", n, "poison");
      c.poison.cover_count = n;
    }
  }
  if (j.contains("attacks")) {
    const auto& a = j["attacks"];
    check_keys(a, {"methods", "count"}, "attacks");
    read(a, "count", c.attack_count, "attacks");
    if (a.contains("methods")) {
      c.attacks.clear();
      for (const auto& m : a["methods"]) {
        if (m.is_string()) {
          c.attacks.push_back(attack::AEConfig::defaults_for(
              wrap_config("attacks.methods", [&] { return attack::method_from_string(m.get<std::string>()); })));
        } else {
          check_keys_like(m, attack::config_to_json(attack::AEConfig{}), "attacks.methods[]");
          c.attacks.push_back(wrap_config("attacks.methods", [&] { return attack::config_from_json(m); }));
        }
      }
    }
  }
  if (j.contains("bundle")) c.bundle = options_from_json(j["bundle"]);
  if (j.contains("adaptive")) {
    const auto& a = j["adaptive"];
    check_keys(a, {"distance_threshold", "gamma1", "epochs", "lr", "batch_size", "pairs", "surrogate_count", "seed"},
               "adaptive");
    read(a, "distance_threshold", c.adaptive.constraint.distance_threshold, "adaptive");
    read(a, "gamma1", c.adaptive.constraint.gamma1, "adaptive");
    read(a, "epochs", c.adaptive.epochs, "adaptive");
    read(a, "lr", c.adaptive.lr, "adaptive");
    read(a, "batch_size", c.adaptive.batch_size, "adaptive");
    read(a, "pairs", c.adaptive.pairs, "adaptive");
    read(a, "surrogate_count", c.adaptive.surrogate_count, "adaptive");
    read(a, "seed", c.adaptive.seed, "adaptive");
  }
  read(j, "threads", c.threads, "");
  wrap_config("config", [&] { c.validate(); return 0; });
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  json j;
  try {
    j = json::parse(text, nullptr, true, true);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------- experiment steps

Splits make_splits(const ExperimentConfig& c) {
  return {make_glyph_set(c.data, Split::train, c.train_first_id, c.train_count),
          make_glyph_set(c.data, Split::reserved, c.reserved_first_id, c.reserved_count),
          make_glyph_set(c.data, Split::test, c.test_first_id, c.test_count)};
}

model::Network train_victim(const ExperimentConfig& c, const LabeledDataset& train_data) {
  const auto spec = model::desk_cnn_spec(train_data.shape, kGlyphClasses, c.model_seed);
  return model::train_model(model::build_model(spec), train_data, c.training);
}

LabeledDataset triggered_test_set(const ExperimentConfig& c, const LabeledDataset& test) {
  const auto all = attack::make_triggered_set(test, c.poison.trigger, c.trigger_seed);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all.label(i) != c.poison.trigger.target_label) keep.push_back(i);
  }
  return all.subset(keep);
}

model::Network train_adaptive_backdoor(const model::Network& backdoored, const LabeledDataset& poisoned_train,
                                       const FrontEnd& surrogate, const attack::TriggerSpec& trigger,
                                       const AdaptiveOptions& options, std::vector<double>* penalty_log) {
  options.constraint.validate();
  if (!surrogate.codec) throw ConfigError("adaptive training needs a surrogate codec");
  if (poisoned_train.split != Split::train) throw ConfigError("adaptive training needs the train split");
  const auto& bank = surrogate.bank;
  const auto& codec = *surrogate.codec;
  std::vector<const trajectory::PcaReducer*> pcas;
  for (const auto& bl : bank.layers()) {
    const auto* p = dynamic_cast<const trajectory::PcaReducer*>(bl.reducer.get());
    if (!p) throw ConfigError("adaptive training differentiates through PCA reducers only");
    pcas.push_back(p);
  }
  model::Network net = backdoored;
  const auto& shape = poisoned_train.shape;
  const auto d = static_cast<Eigen::Index>(bank.target_dim());
  const auto taps = net.tap_plan().size();
  const double gamma = options.constraint.gamma1;
  const double thr = options.constraint.distance_threshold;

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(poisoned_train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Adam opt(options.lr);
  auto grads = net.make_gradients();
  const auto params = net.parameter_spans();
  const auto grad_spans = grads.spans();
  model::Network::Cache cache, pair_cache;
  MatrixRM dlogits;
  std::vector<float> labels;
  auto& rec = net.record();

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, penalty_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      labels.clear();
      for (std::size_t i : idx) labels.push_back(poisoned_train.labels[i]);
      const MatrixRM logits = net.forward_batch(model::batch_inputs(poisoned_train, idx), &cache);
      const double l_bd = model::loss_and_grad(net, logits, labels, dlogits);
      grads.zero();
      net.backward_batch(cache, dlogits, &grads, nullptr, false);

      std::vector<std::size_t> clean;
      for (std::size_t i : idx) {
        if (poisoned_train.label(i) != trigger.target_label) clean.push_back(i);
        if (clean.size() == static_cast<std::size_t>(options.pairs)) break;
      }
      double penalty = 0.0;
      if (!clean.empty()) {
        const auto P = static_cast<Eigen::Index>(clean.size());
        MatrixRM X(2 * P, static_cast<Eigen::Index>(shape.size()));
        for (Eigen::Index r = 0; r < P; ++r) {
          const auto src = poisoned_train.sample(clean[static_cast<std::size_t>(r)]);
          std::copy(src.begin(), src.end(), X.row(r).data());
          const auto xt = attack::apply_trigger(src, shape, trigger,
                                                mix_seed(options.seed, poisoned_train.ids[clean[static_cast<std::size_t>(r)]]));
          std::copy(xt.begin(), xt.end(), X.row(P + r).data());
        }
        net.forward_batch(X, &pair_cache);
        MatrixRM flat(2 * P, static_cast<Eigen::Index>(bank.layers().size()) * d);
        for (std::size_t r = 0; r < bank.layers().size(); ++r) {
          const MatrixRM& A = pair_cache.outputs[static_cast<std::size_t>(bank.layers()[r].layer_index)];
          flat.middleCols(static_cast<Eigen::Index>(r) * d, d) =
              (A.rowwise() - pcas[r]->mean().transpose()) * pcas[r]->components().transpose();
        }
        const MatrixRM Z = codec.encode_batch(flat);
        MatrixRM dz = MatrixRM::Zero(Z.rows(), Z.cols());
        bool active = false;
        for (Eigen::Index r = 0; r < P; ++r) {
          const Eigen::RowVectorXf diff = Z.row(P + r) - Z.row(r);
          const double dist = attack::trajectory_distance({Z.row(r).data(), static_cast<std::size_t>(Z.cols())},
                                                          {Z.row(P + r).data(), static_cast<std::size_t>(Z.cols())});
          penalty += attack::adaptive_penalty(dist, options.constraint);
          if (dist > thr && dist > 0.0) {
            const Eigen::RowVectorXf g = diff * static_cast<float>(gamma / (static_cast<double>(P) * dist));
            dz.row(P + r) = g;
            dz.row(r) = -g;
            active = true;
          }
        }
        penalty /= static_cast<double>(P);
        if (active) {
          const MatrixRM G = codec.encoder_input_gradient(flat, dz);
          std::vector<MatrixRM> tap_grads(taps);
          for (std::size_t r = 0; r < bank.layers().size(); ++r) {
            tap_grads[static_cast<std::size_t>(bank.layers()[r].ordinal - 1)] =
                G.middleCols(static_cast<Eigen::Index>(r) * d, d) * pcas[r]->components();
          }
          const MatrixRM no_logit_grad = MatrixRM::Zero(2 * P, net.output_arity());
          net.backward_batch(pair_cache, no_logit_grad, &grads, &tap_grads, false);
        }
      }
      const double total = l_bd + gamma * penalty;
      if (!std::isfinite(total)) throw NumericError("non-finite adaptive loss at epoch " + std::to_string(epoch));
      opt.step(params, grad_spans);
      loss_sum += total;
      penalty_sum += penalty;
      ++batches;
    }
    rec.loss_log.push_back(loss_sum / static_cast<double>(batches));
    if (penalty_log) penalty_log->push_back(penalty_sum / static_cast<double>(batches));
  }
  rec.epochs_trained += options.epochs;
  return net;
}

EvaluationSets make_evaluation_sets(const ExperimentConfig& c, const model::Network& net, const Splits& splits,
                                    bool backdoored) {
  EvaluationSets sets;
  sets.benign = splits.test;
  if (backdoored) sets.triggered = triggered_test_set(c, splits.test);
  const auto pool = splits.test.head(std::min(c.attack_count, splits.test.size()));
  for (const auto& cfg : c.attacks) {
    const auto crafted = attack::craft_set(net, pool, cfg, c.threads);
    sets.adversarial.emplace_back(attack::to_string(cfg.method), crafted.successful());
  }
  return sets;
}

DetectionReport evaluate(const Bundle& bundle, const EvaluationSets& sets, const ExperimentConfig& c) {
  DetectionReport report;
  const auto t0 = Clock::now();
  report.rows = detect(bundle, sets.benign, Truth::benign, "none", c.threads);
  if (sets.triggered) {
    auto rows = detect(bundle, *sets.triggered, Truth::trigger, "trigger:" + attack::to_string(c.poison.trigger.kind),
                       c.threads);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  for (const auto& [name, data] : sets.adversarial) {
    auto rows = detect(bundle, data, Truth::ae, name, c.threads);
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
  }
  report.timings.emplace_back("detect", seconds_since(t0));
  report.metrics = compute_metrics(report.rows);
  report.metrics.cda = model::evaluate_cda(bundle.model(), sets.benign);
  if (sets.triggered && !sets.triggered->empty()) {
    report.metrics.asr = model::evaluate_asr(bundle.model(), *sets.triggered, c.poison.trigger.target_label);
  }
  report.config = {{"experiment", config_to_json(c)}, {"bundle", bundle.manifest()}};
  return report;
}

json AblationResult::to_json() const {
  auto summary = [](const DetectionReport& r) {
    json j = report_to_json(r, false)["metrics"];
    j["bundle"] = r.config.value("bundle", json::object()).value("options", json::object());
    return j;
  };
  return {{"variant", variant}, {"baseline", summary(baseline)}, {"variant_metrics", summary(variant_report)}};
}

BundleOptions ablation_options(const BundleOptions& base, const std::string& variant, std::size_t* reserved_count) {
  BundleOptions o = base;
  if (variant == "no_codec") {
    o.use_codec = false;
    o.use_spectrum = false;
  } else if (variant == "no_spectrum") {
    o.use_spectrum = false;
  } else if (variant.rfind("sampling:", 0) == 0) {
    o.plan = variant.substr(9);
    trajectory::make_sampling_plan(o.plan, 64);
  } else if (variant.rfind("reserved:", 0) == 0) {
    std::size_t n = 0;
    try {
      n = std::stoul(variant.substr(9));
    } catch (const std::exception&) {
      throw ConfigError("reserved ablation needs a count, e.g. reserved:100");
    }
    if (reserved_count) *reserved_count = n;
  } else {
    throw ConfigError("unknown ablation variant '" + variant +
                      "' (no_codec, no_spectrum, sampling:SS1..SS5|full, reserved:N)");
  }
  o.validate();
  return o;
}

AblationResult run_ablation(const ExperimentConfig& c, const std::shared_ptr<const model::Network>& net,
                            const Splits& splits, const EvaluationSets& sets, const std::string& variant,
                            const DetectionReport* baseline) {
  std::size_t reserved_n = splits.reserved.size();
  const auto options = ablation_options(c.bundle, variant, &reserved_n);
  if (reserved_n > splits.reserved.size()) {
    throw ConfigError("reserved ablation asks for " + std::to_string(reserved_n) + " samples, only " +
                      std::to_string(splits.reserved.size()) + " exist");
  }
  AblationResult result;
  result.variant = variant;
  if (baseline) {
    result.baseline = *baseline;
  } else {
    Timings t;
    const auto b = build_bundle(net, splits.reserved, c.bundle, c.threads, &t);
    result.baseline = evaluate(b, sets, c);
    result.baseline.timings.insert(result.baseline.timings.begin(), t.begin(), t.end());
  }
  Timings t;
  const auto v = build_bundle(net, splits.reserved.head(reserved_n), options, c.threads, &t);
  result.variant_report = evaluate(v, sets, c);
  result.variant_report.timings.insert(result.variant_report.timings.begin(), t.begin(), t.end());
  return result;
}

}  // namespace trajguard::harness
