// Command-line front end. Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajguard/attack.hpp"
#include "trajguard/dataset.hpp"
#include "trajguard/harness.hpp"
#include "trajguard/model.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace trajguard;

namespace {

struct Args {
  std::string config, out, model, data, bundle, inputs, crafted_in, method, truth = "ae", variant, report;
  std::vector<std::string> crafted;
  std::size_t count = 0;
  bool backdoored = false;
};

harness::ExperimentConfig config_of(const Args& a) {
  return a.config.empty() ? harness::ExperimentConfig{} : harness::load_config(a.config);
}

void write_run_manifest(const fs::path& path, const std::string& command, const harness::ExperimentConfig& c,
                        const json& extra = json::object()) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  json j{{"command", command}, {"config", harness::config_to_json(c)}, {"arguments", extra}};
  io::write_text(path, j.dump(2) + "\n");
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

void print_metrics(const harness::Metrics& m) {
  std::cout << "online FRR   " << fmt(m.online_frr()) << "  (" << m.benign.flagged << "/" << m.benign.total << ")\n";
  for (const auto& [name, r] : m.attacks) {
    std::cout << "detection    " << name << " " << fmt(r.value()) << "  (" << r.flagged << "/" << r.total << ")\n";
  }
  if (m.cda) std::cout << "CDA          " << fmt(m.cda) << "\n";
  if (m.asr) std::cout << "ASR          " << fmt(m.asr) << "\n";
  if (m.errors) std::cout << "errors       " << m.errors << "\n";
}

void write_report(const std::string& prefix, const harness::DetectionReport& r) {
  const fs::path p(prefix);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  io::write_text(prefix + ".json", harness::report_to_json(r).dump(2) + "\n");
  io::write_text(prefix + ".csv", harness::rows_to_csv(r.rows));
  io::write_text(prefix + ".metrics.csv", harness::metrics_to_csv(r.metrics));
}

std::shared_ptr<const model::Network> load_model(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--model is required");
  return std::make_shared<const model::Network>(model::load_checkpoint(dir));
}

int cmd_train_model(const Args& a) {
  const auto c = config_of(a);
  const auto splits = harness::make_splits(c);
  LabeledDataset train = a.data.empty() ? splits.train : load_dataset(a.data);
  const auto net = harness::train_victim(c, train);
  model::save_checkpoint(a.out, net);
  write_run_manifest(fs::path(a.out) / "run.json", "train-model", c, {{"data", a.data}});
  std::cout << "trained " << net.record().epochs_trained << " epochs on " << train.size() << " samples, CDA "
            << fmt(model::evaluate_cda(net, splits.test)) << "\n";
  return 0;
}

int cmd_poison(const Args& a) {
  const auto c = config_of(a);
  const auto splits = harness::make_splits(c);
  const auto result = attack::poison_dataset(splits.train, c.poison);
  save_dataset(a.out, result.data);
  write_run_manifest(fs::path(a.out) / "run.json", "poison", c,
                     {{"poisoned_indices", result.poisoned_indices}, {"cover_indices", result.cover_indices}});
  std::cout << "poisoned " << result.poisoned_indices.size() << " of " << result.data.size() << " samples\n";
  return 0;
}

int cmd_craft_ae(const Args& a) {
  auto c = config_of(a);
  const auto net = load_model(a.model);
  const auto splits = harness::make_splits(c);
  attack::AEConfig cfg = attack::AEConfig::defaults_for(attack::method_from_string(a.method));
  for (const auto& configured : c.attacks) {
    if (configured.method == cfg.method) cfg = configured;
  }
  const std::size_t n = a.count ? a.count : c.attack_count;
  const auto set = attack::craft_set(*net, splits.test.head(std::min(n, splits.test.size())), cfg, c.threads);
  attack::save_crafted(a.out, set);
  write_run_manifest(fs::path(a.out) / "run.json", "craft-ae", c, {{"method", a.method}, {"count", n}});
  std::cout << a.method << ": " << set.success_count() << " of " << set.results.size() << " succeeded\n";
  return 0;
}

int cmd_build_bundle(const Args& a) {
  const auto c = config_of(a);
  const auto net = load_model(a.model);
  const LabeledDataset reserved = a.data.empty() ? harness::make_splits(c).reserved : load_dataset(a.data);
  harness::Timings t;
  const auto bundle = harness::build_bundle(net, reserved, c.bundle, c.threads, &t);
  harness::save_bundle(a.out, bundle);
  json timings = json::object();
  for (const auto& [k, v] : t) timings[k] = v;
  write_run_manifest(fs::path(a.out).string() + ".run.json", "build-bundle", c, {{"timings_s", timings}});
  std::cout << "bundle: " << bundle.front().bank.layers().size() << " layers x " << bundle.front().bank.target_dim()
            << ", feature width " << bundle.feature_dim() << ", threshold " << bundle.detector().threshold() << "\n";
  for (const auto& [k, v] : t) std::cout << "  " << k << " " << v << " s\n";
  return 0;
}

LabeledDataset read_inputs(const Args& a) {
  if (!a.crafted_in.empty()) return attack::load_crafted(a.crafted_in).successful();
  if (!a.inputs.empty()) return load_dataset(a.inputs);
  throw ConfigError("detect needs --inputs (dataset) or --crafted (crafted set)");
}

int cmd_detect(const Args& a) {
  const auto bundle = harness::load_bundle(a.bundle);
  const auto data = read_inputs(a);
  const auto truth = harness::truth_from_string(a.truth);
  harness::DetectionReport r;
  const auto t0 = std::chrono::steady_clock::now();
  r.rows = harness::detect(bundle, data, truth, a.method.empty() ? std::string("unknown") : a.method);
  r.timings.emplace_back("detect", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  r.metrics = harness::compute_metrics(r.rows);
  r.config = {{"bundle", bundle.manifest()}, {"inputs", a.inputs.empty() ? a.crafted_in : a.inputs}};
  write_report(a.out, r);
  print_metrics(r.metrics);
  return 0;
}

int cmd_evaluate(const Args& a) {
  const auto c = config_of(a);
  const auto bundle = harness::load_bundle(a.bundle);
  const auto splits = harness::make_splits(c);
  harness::EvaluationSets sets;
  if (a.crafted.empty()) {
    sets = harness::make_evaluation_sets(c, bundle.model(), splits, a.backdoored);
  } else {
    sets.benign = splits.test;
    if (a.backdoored) sets.triggered = harness::triggered_test_set(c, splits.test);
    for (const auto& dir : a.crafted) {
      const auto set = attack::load_crafted(dir);
      sets.adversarial.emplace_back(attack::to_string(set.config.method), set.successful());
    }
  }
  const auto r = harness::evaluate(bundle, sets, c);
  write_report(a.out, r);
  print_metrics(r.metrics);
  return 0;
}

int cmd_ablate(const Args& a) {
  const auto c = config_of(a);
  const auto net = load_model(a.model);
  const auto splits = harness::make_splits(c);
  const auto sets = harness::make_evaluation_sets(c, *net, splits, a.backdoored);
  const auto result = harness::run_ablation(c, net, splits, sets, a.variant);
  write_report(a.out + ".baseline", result.baseline);
  write_report(a.out + ".variant", result.variant_report);
  io::write_text(a.out + ".json", result.to_json().dump(2) + "\n");
  std::cout << "baseline\n";
  print_metrics(result.baseline.metrics);
  std::cout << a.variant << "\n";
  print_metrics(result.variant_report.metrics);
  return 0;
}

int cmd_report(const Args& a) {
  json j;
  try {
    j = json::parse(io::read_text(a.report));
  } catch (const json::exception& e) {
    throw ConfigError("report is not valid JSON: " + std::string(e.what()));
  }
  const auto r = harness::report_from_json(j);
  // Stored aggregates must agree with a recount over the rows.
  const auto stored = j.at("metrics");
  const auto frr = r.metrics.online_frr();
  const bool frr_ok = stored.at("online_frr").is_null() ? !frr : (frr && stored["online_frr"].get<double>() == *frr);
  bool ok = frr_ok;
  for (const auto& [name, rate] : r.metrics.attacks) {
    const auto& s = stored.at("detection").value(name, json::object());
    ok = ok && s.value("total", std::size_t{0}) == rate.total && s.value("flagged", std::size_t{0}) == rate.flagged;
  }
  print_metrics(r.metrics);
  if (!a.out.empty()) {
    io::write_text(a.out + ".csv", harness::rows_to_csv(r.rows));
    io::write_text(a.out + ".metrics.csv", harness::metrics_to_csv(r.metrics));
  }
  std::cout << (ok ? "aggregates consistent with rows\n" : "aggregates DIFFER from a recount of the rows\n");
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajectory-spectrum detector for adversarial and trigger inputs"};
  app.require_subcommand(1);
  Args a;

  auto add_config = [&](CLI::App* s) { s->add_option("-c,--config", a.config, "JSON config (defaults when omitted)"); };
  auto* train = app.add_subcommand("train-model", "train the victim classifier");
  add_config(train);
  train->add_option("--data", a.data, "training dataset directory (poisoned or clean); default: clean train split");
  train->add_option("-o,--out", a.out, "checkpoint directory")->required();

  auto* poison = app.add_subcommand("poison", "write the poisoned training split");
  add_config(poison);
  poison->add_option("-o,--out", a.out, "dataset directory")->required();

  auto* craft = app.add_subcommand("craft-ae", "craft adversarial examples against a model");
  add_config(craft);
  craft->add_option("-m,--model", a.model, "checkpoint directory")->required();
  craft->add_option("--method", a.method, "fgsm, bim, pgd, cw, jsma, deepfool, boundary")->required();
  craft->add_option("-n,--count", a.count, "number of test samples to attack");
  craft->add_option("-o,--out", a.out, "crafted-set directory")->required();

  auto* build = app.add_subcommand("build-bundle", "fit reducers, codec and detector on reserved samples");
  add_config(build);
  build->add_option("-m,--model", a.model, "checkpoint directory")->required();
  build->add_option("--data", a.data, "reserved dataset directory; default: reserved split from config");
  build->add_option("-o,--out", a.out, "bundle directory")->required();

  auto* detect = app.add_subcommand("detect", "score samples with a saved bundle");
  detect->add_option("-b,--bundle", a.bundle, "bundle directory")->required();
  detect->add_option("--inputs", a.inputs, "dataset directory");
  detect->add_option("--crafted", a.crafted_in, "crafted-set directory (successful samples are scored)");
  detect->add_option("--truth", a.truth, "benign, ae or trigger");
  detect->add_option("--method", a.method, "attack label for the rows");
  detect->add_option("-o,--out", a.out, "report prefix (.json, .csv, .metrics.csv)")->required();

  auto* evaluate = app.add_subcommand("evaluate", "benign, trigger and AE metrics for a bundle");
  add_config(evaluate);
  evaluate->add_option("-b,--bundle", a.bundle, "bundle directory")->required();
  evaluate->add_option("--crafted", a.crafted, "crafted-set directories; default: craft from config");
  evaluate->add_flag("--backdoored", a.backdoored, "also score the triggered test set");
  evaluate->add_option("-o,--out", a.out, "report prefix")->required();

  auto* ablate = app.add_subcommand("ablate", "baseline vs one variant");
  add_config(ablate);
  ablate->add_option("-m,--model", a.model, "checkpoint directory")->required();
  ablate->add_option("--variant", a.variant, "no_codec, no_spectrum, sampling:SSk, reserved:N")->required();
  ablate->add_flag("--backdoored", a.backdoored, "also score the triggered test set");
  ablate->add_option("-o,--out", a.out, "report prefix")->required();

  auto* report = app.add_subcommand("report", "recount a JSON report and export CSV");
  report->add_option("-i,--in", a.report, "report JSON")->required();
  report->add_option("-o,--out", a.out, "CSV prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train) return cmd_train_model(a);
    if (*poison) return cmd_poison(a);
    if (*craft) return cmd_craft_ae(a);
    if (*build) return cmd_build_bundle(a);
    if (*detect) return cmd_detect(a);
    if (*evaluate) return cmd_evaluate(a);
    if (*ablate) return cmd_ablate(a);
    if (*report) return cmd_report(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
