// fmbff: dataset synthesis, training, evaluation, prediction and gradient
// verification from the command line.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fmbff/checkpoint.hpp"
#include "fmbff/config_file.hpp"
#include "fmbff/data.hpp"
#include "fmbff/image_io.hpp"
#include "fmbff/metrics.hpp"
#include "fmbff/ops.hpp"
#include "fmbff/parallel.hpp"
#include "fmbff/training.hpp"
#include "fmbff/verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace fmbff;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitVerify = 4;

constexpr const char* kVersion = "1.0.0";

// Hash of a git blob object: sha1("blob <size>\0" + bytes).
std::string git_blob_sha1(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

// SOURCE_DATE_EPOCH pins timestamps so manifests are reproducible.
std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH"); env && *env) {
    char* end = nullptr;
    const long long v = std::strtoll(env, &end, 10);
    if (*end != '\0' || v < 0) throw ConfigError("SOURCE_DATE_EPOCH: expected a nonnegative integer");
    t = static_cast<std::time_t>(v);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json config_json(const RunConfig& cfg) {
  json out = json::object();
  const RunConfig canonical = parse_config(format_config(cfg));
  const std::string text = format_config(canonical);
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::string line = text.substr(pos, nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    const std::size_t eq = line.find(" = ");
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

// One manifest per artifact-producing command, written last into `out`.
// Paths are recorded relative to `out` so identical runs in different
// directories produce identical manifests.
struct Manifest {
  explicit Manifest(std::string cmd) : command(std::move(cmd)) {}

  std::string command;
  std::string started_at = timestamp();
  json body = json::object();
  std::vector<std::string> outputs;

  void write(const fs::path& out) {
    json m;
    m["tool"] = "fmbff";
    m["version"] = kVersion;
    m["command"] = command;
    for (auto& [k, v] : body.items()) m[k] = v;
    json files = json::array();
    for (const std::string& rel : outputs) {
      files.push_back({{"path", rel}, {"sha1", git_blob_sha1(read_file((out / rel).string()))}});
    }
    m["outputs"] = files;
    m["started_at"] = started_at;
    m["finished_at"] = timestamp();
    write_file((out / "run_manifest.json").string(), m.dump(2) + "\n");
  }
};

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw IoError("cannot create directory '" + p.string() + "': " + ec.message());
}

void log_line(const std::string& s) { std::cerr << s << '\n' << std::flush; }

// ------------------------------------------------------------------ synth

struct SynthArgs {
  int n = 0;
  int size = 64;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  if (a.n <= 0) throw ConfigError("--n: must be positive");
  if (a.size <= 0) throw ConfigError("--size: must be positive");
  Manifest man{"synth"};
  const auto samples = generate_synthetic(a.n, a.size, a.size, a.seed);
  const fs::path out(a.out);
  make_dir(out);
  write_dataset(out.string(), samples);
  man.body["seed"] = a.seed;
  man.body["params"] = {{"n", a.n}, {"size", a.size}};
  man.outputs.push_back("manifest.txt");
  for (const Sample& s : samples) {
    man.outputs.push_back("images/" + s.id + ".ppm");
    man.outputs.push_back("masks/" + s.id + "_mask.pgm");
  }
  man.write(out);
  log_line("wrote " + std::to_string(a.n) + " samples to " + out.string());
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string data, config, out;
  std::vector<std::string> overrides;
  int folds = 0;
  int fold = -1;
};

RunConfig load_run_config(const TrainArgs& a) {
  RunConfig cfg;
  if (!a.config.empty()) cfg = parse_config(read_file(a.config));
  for (const std::string& o : a.overrides) {
    const std::size_t eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set '" + o + "': expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    set_config_value(cfg, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::string id_list(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) s += id + "\n";
  return s;
}

// Trains one split into `dir`; returns the paths written, relative to `root`.
std::vector<std::string> train_one(const std::vector<Sample>& all, const SplitPlan& plan, const RunConfig& cfg,
                                   const fs::path& root, const std::string& sub, json& summary) {
  const fs::path dir = sub.empty() ? root : root / sub;
  make_dir(dir);
  const auto train_set = select(all, plan.train_ids);
  const auto val_set = select(all, plan.val_ids);
  for (const Sample& s : train_set) {
    if (s.image.dim(1) != cfg.model.height || s.image.dim(2) != cfg.model.width) {
      throw ConfigError("model.input_size: " + std::to_string(cfg.model.height) + "x" +
                        std::to_string(cfg.model.width) + " does not match dataset image " + s.id + " (" +
                        std::to_string(s.image.dim(1)) + "x" + std::to_string(s.image.dim(2)) + ")");
    }
  }
  const std::string tag = sub.empty() ? "" : "[" + sub + "] ";
  log_line(tag + "train " + std::to_string(train_set.size()) + " / val " + std::to_string(val_set.size()));

  Model<float> model(cfg.model);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = train(model, train_set, val_set, cfg.train, [&](const EpochRecord& e) {
    char buf[160];
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::snprintf(buf, sizeof buf, "%sepoch %3d  loss %.4f  lr %.3g  val dice %.4f%s  (%.0fs)", tag.c_str(), e.epoch,
                  e.train_loss, e.lr, e.val.mean.d, e.improved ? " *" : "", secs);
    log_line(buf);
  });

  save_checkpoint((dir / "checkpoint.fmbf").string(), model, cfg, r.state);
  write_file((dir / "history.csv").string(), history_csv(r.history));
  write_file((dir / "split.txt").string(), "# train\n" + id_list(plan.train_ids) + "# val\n" + id_list(plan.val_ids));

  const std::string prefix = sub.empty() ? "" : sub + "/";
  summary = {{"best_epoch", r.best_epoch},
             {"best_val_dice", r.best_val_dice},
             {"epochs", static_cast<int>(r.history.size())},
             {"stopped_early", r.stopped_early},
             {"checkpoint_sha1", git_blob_sha1(read_file((dir / "checkpoint.fmbf").string()))}};
  return {prefix + "checkpoint.fmbf", prefix + "history.csv", prefix + "split.txt"};
}

int cmd_train(const TrainArgs& a) {
  Manifest man{"train"};
  const RunConfig cfg = load_run_config(a);
  if (a.folds == 1 || a.folds < 0) throw ConfigError("--folds: must be at least 2");
  if (a.fold >= 0 && a.folds == 0) throw ConfigError("--fold requires --folds");
  if (a.fold >= a.folds && a.folds > 0) throw ConfigError("--fold: must be below --folds");

  const auto all = load_dataset(a.data);
  std::vector<std::string> ids;
  for (const Sample& s : all) ids.push_back(s.id);
  const fs::path out(a.out);
  make_dir(out);
  write_file((out / "config.txt").string(), format_config(cfg));
  man.outputs.push_back("config.txt");

  man.body["seed"] = cfg.train.seed;
  man.body["config"] = config_json(cfg);
  if (a.folds == 0) {
    json summary;
    for (auto& p : train_one(all, split(ids, cfg.data.split_ratio, cfg.data.split_seed), cfg, out, "", summary)) {
      man.outputs.push_back(p);
    }
    man.body["checkpoint_sha1"] = summary["checkpoint_sha1"];
    man.body["result"] = summary;
  } else {
    const SplitPlan plan = kfold(ids, a.folds, cfg.data.split_seed);
    json results = json::array();
    man.body["folds"] = a.folds;
    for (int f = 0; f < a.folds; ++f) {
      if (a.fold >= 0 && f != a.fold) continue;
      json summary;
      for (auto& p : train_one(all, fold_split(plan, f), cfg, out, "fold_" + std::to_string(f), summary)) {
        man.outputs.push_back(p);
      }
      summary["fold"] = f;
      results.push_back(summary);
    }
    man.body["result"] = results;
  }
  man.write(out);
  return 0;
}

// ------------------------------------------------------------------ eval

struct EvalArgs {
  std::string data, ckpt, pred, out;
  int folds = 0;
  std::uint64_t split_seed = 0;
  bool precision = false;
};

// Per-image metrics of `model` on `samples`, appended in order.
void append_model_metrics(const Model<float>& model, const std::vector<Sample>& samples,
                          std::vector<std::string>& ids, std::vector<Metrics>& per) {
  const MetricsReport r = evaluate(model, samples);
  ids.insert(ids.end(), r.ids.begin(), r.ids.end());
  per.insert(per.end(), r.per_image.begin(), r.per_image.end());
}

int cmd_eval(const EvalArgs& a) {
  if (a.ckpt.empty() == a.pred.empty()) throw ConfigError("eval: give exactly one of --ckpt or --pred");
  if (a.folds == 1 || a.folds < 0) throw ConfigError("--folds: must be at least 2");
  Manifest man{"eval"};
  const auto all = load_dataset(a.data);
  std::vector<std::string> all_ids;
  for (const Sample& s : all) all_ids.push_back(s.id);

  std::vector<std::string> ids;
  std::vector<Metrics> per;
  std::vector<int> fold_of;
  std::uint64_t split_seed = a.split_seed;
  json inputs = json::object();

  if (!a.pred.empty()) {
    // Precomputed masks: <pred>/<id>_mask.pgm, thresholded like ground truth.
    for (const Sample& s : all) {
      const Tensor<float> p = read_mask((fs::path(a.pred) / (s.id + "_mask.pgm")).string());
      if (p.shape() != s.mask.shape()) {
        throw ValidationError("eval: prediction for " + s.id + " has extents " + shape_str(p.shape()) +
                              ", mask has " + shape_str(s.mask.shape()));
      }
      ids.push_back(s.id);
      per.push_back(metrics_from(confusion(reshape(p, {1, 1, p.dim(1), p.dim(2)}),
                                           reshape(s.mask, {1, 1, p.dim(1), p.dim(2)}))[0]));
    }
  } else if (fs::is_directory(a.ckpt)) {
    // Cross-validation run: fold_<i>/checkpoint.fmbf, each scored on its own held-out fold.
    if (a.folds == 0) throw ConfigError("eval: a checkpoint directory requires --folds");
    for (int f = 0; f < a.folds; ++f) {
      const fs::path path = fs::path(a.ckpt) / ("fold_" + std::to_string(f)) / "checkpoint.fmbf";
      const std::string bytes = read_file(path.string());
      const Checkpoint ck = decode_checkpoint(bytes);
      inputs["fold_" + std::to_string(f) + "_checkpoint_sha1"] = git_blob_sha1(bytes);
      split_seed = ck.config.data.split_seed;
      const SplitPlan plan = kfold(all_ids, a.folds, split_seed);
      append_model_metrics(*ck.model, select(all, plan.folds[f]), ids, per);
      fold_of.insert(fold_of.end(), plan.folds[f].size(), f);
    }
  } else {
    const std::string bytes = read_file(a.ckpt);
    const Checkpoint ck = decode_checkpoint(bytes);
    man.body["checkpoint_sha1"] = git_blob_sha1(bytes);
    man.body["config"] = config_json(ck.config);
    split_seed = ck.config.data.split_seed;
    append_model_metrics(*ck.model, all, ids, per);
  }
  if (a.folds > 0 && fold_of.empty()) {
    // One model (or mask set) scored over every image, grouped by fold.
    const SplitPlan plan = kfold(all_ids, a.folds, split_seed);
    std::map<std::string, int> fold_by_id;
    for (int f = 0; f < a.folds; ++f) {
      for (const auto& id : plan.folds[f]) fold_by_id[id] = f;
    }
    for (const auto& id : ids) fold_of.push_back(fold_by_id.at(id));
  }

  const MetricsReport report = aggregate(ids, per, fold_of);
  const std::string table = report_table(report, a.precision);
  std::cout << table << std::flush;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    make_dir(out);
    write_file((out / "metrics.csv").string(), report_csv(report, a.precision));
    write_file((out / "summary.txt").string(), table);
    man.body["seed"] = split_seed;
    if (!inputs.empty()) man.body["inputs"] = inputs;
    man.body["folds"] = a.folds;
    man.outputs = {"metrics.csv", "summary.txt"};
    man.write(out);
  }
  return 0;
}

// ------------------------------------------------------------------ predict

struct PredictArgs {
  std::string image, ckpt, out;
};

int cmd_predict(const PredictArgs& a) {
  Manifest man{"predict"};
  const std::string bytes = read_file(a.ckpt);
  const Checkpoint ck = decode_checkpoint(bytes);
  const Tensor<float> img = read_image(a.image);
  const Index h = img.dim(1), w = img.dim(2);
  const ModelConfig& mc = ck.config.model;

  // Inputs of another size are resampled to the model extent and back.
  Tensor<float> x = reshape(img, {1, 3, h, w});
  if (h != mc.height || w != mc.width) x = bilinear_resize(x, mc.height, mc.width);
  Tensor<float> prob = ck.model->predict(x);
  if (h != mc.height || w != mc.width) prob = bilinear_resize(prob, h, w);
  prob = reshape(prob, {1, h, w});

  std::vector<float> bin(static_cast<std::size_t>(h * w));
  const auto p = prob.data();
  for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = p[i] >= 0.5f ? 1.0f : 0.0f;
  const Tensor<float> mask({1, h, w}, std::move(bin));

  const fs::path out(a.out);
  make_dir(out);
  const std::string stem = fs::path(a.image).stem().string();
  write_mask((out / (stem + "_mask.pgm")).string(), mask);
  write_pfm((out / (stem + "_prob.pfm")).string(), prob);
  man.body["checkpoint_sha1"] = git_blob_sha1(bytes);
  man.body["config"] = config_json(ck.config);
  man.body["input_sha1"] = git_blob_sha1(read_file(a.image));
  man.outputs = {stem + "_mask.pgm", stem + "_prob.pfm"};
  man.write(out);
  log_line("wrote " + (out / (stem + "_mask.pgm")).string());
  return 0;
}

// ------------------------------------------------------------------ gradcheck

struct GradcheckArgs {
  std::string blocks = "all";
  std::string fault;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  if (!a.fault.empty()) set_injected_fault(a.fault);
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const BlockCheck& c : run_gradcheck_suite(a.blocks)) {
    std::printf("%-6s  max rel err %.3e  tol %.0e  leaves %2d  worst %-28s %s\n", c.block.c_str(), c.max_rel_error,
                c.tolerance, c.leaves, c.worst_leaf.c_str(), c.passed ? "ok" : "FAIL");
    if (!c.passed) {
      std::printf("  failing parameter: %s\n", c.worst_leaf.c_str());
      ok = false;
    }
    std::fflush(stdout);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s (%.1fs)\n", ok ? "gradcheck passed" : "gradcheck FAILED", secs);
  return ok ? 0 : kExitVerify;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ValidationError*>(&e)) {
    return kExitIo;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fmbff: segmentation network tools (synth, train, eval, predict, gradcheck)"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic lesion dataset");
  synth->add_option("--n", sa.n, "Number of samples")->required();
  synth->add_option("--size", sa.size, "Square image extent")->capture_default_str();
  synth->add_option("--seed", sa.seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", sa.out, "Output dataset directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model and keep the best validation checkpoint");
  trn->add_option("--data", ta.data, "Dataset directory")->required();
  trn->add_option("--config", ta.config, "Config file (key = value lines)");
  trn->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
  trn->add_option("--out", ta.out, "Output directory")->required();
  trn->add_option("--folds", ta.folds, "k-fold cross-validation: train each fold into fold_<i>/");
  trn->add_option("--fold", ta.fold, "With --folds, train only this fold");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Score a checkpoint (or predicted masks) against a dataset");
  evl->add_option("--data", ea.data, "Dataset directory")->required();
  evl->add_option("--ckpt", ea.ckpt, "Checkpoint file, or a train --folds output directory");
  evl->add_option("--pred", ea.pred, "Directory of <id>_mask.pgm predictions");
  evl->add_option("--folds", ea.folds, "Report per-fold mean and std over k folds");
  evl->add_option("--split-seed", ea.split_seed, "Fold seed when scoring --pred masks")->capture_default_str();
  evl->add_option("--out", ea.out, "Write metrics.csv, summary.txt and a manifest here");
  evl->add_flag("--precision", ea.precision, "Include precision");

  PredictArgs pa;
  auto* prd = app.add_subcommand("predict", "Segment one image");
  prd->add_option("--image", pa.image, "Input PPM/PGM/PNG image")->required();
  prd->add_option("--ckpt", pa.ckpt, "Checkpoint file")->required();
  prd->add_option("--out", pa.out, "Output directory")->required();

  GradcheckArgs ga;
  auto* gck = app.add_subcommand("gradcheck", "Finite-difference gradient checks in 64-bit");
  gck->add_option("--blocks", ga.blocks, "all, or a comma list of fmcab,biffm,vitm,frm,model")->capture_default_str();
  gck->add_option("--inject-fault", ga.fault, "Corrupt the backward rule of this op (self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    configure_threads_from_env();
    if (*synth) return cmd_synth(sa);
    if (*trn) return cmd_train(ta);
    if (*evl) return cmd_eval(ea);
    if (*prd) return cmd_predict(pa);
    if (*gck) return cmd_gradcheck(ga);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 1;
}
