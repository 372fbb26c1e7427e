// Copyright 2026 The loopfilter Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "loopfilter/codec.hpp"
#include "loopfilter/compress.hpp"
#include "loopfilter/dfp.hpp"
#include "loopfilter/hash.hpp"
#include "loopfilter/image_io.hpp"
#include "loopfilter/network.hpp"
#include "loopfilter/serialize.hpp"
#include "loopfilter/trainer.hpp"

namespace loopfilter::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// One record per line: `event=<name> key=value ...`. Values containing
// spaces or quotes are quoted.
class Log {
 public:
  Log(std::ostream& out, const std::string& path) : out_(out) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) fail(ErrorCode::kIo, "cannot open log file '" + path + "'");
    }
  }

  class Record {
   public:
    Record(Log& log, const std::string& event) : log_(log) { line_ << "event=" << event; }
    Record(const Record&) = delete;
    ~Record() { log_.write(line_.str()); }

    template <typename T>
    Record& kv(const std::string& key, const T& value) {
      std::ostringstream v;
      if constexpr (std::is_floating_point_v<T>) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(value));
        v << buf;
      } else {
        v << value;
      }
      std::string s = v.str();
      if (s.empty() || s.find_first_of(" \t\"=") != std::string::npos) {
        std::ostringstream q;
        q << std::quoted(s);
        s = q.str();
      }
      line_ << ' ' << key << '=' << s;
      return *this;
    }

   private:
    Log& log_;
    std::ostringstream line_;
  };

  Record operator()(const std::string& event) { return Record(*this, event); }

 private:
  void write(const std::string& line) {
    out_ << line << '\n';
    if (file_.is_open()) file_ << line << '\n';
  }

  std::ostream& out_;
  std::ofstream file_;
};

struct ImageSource {
  std::vector<std::string> images;  // PGM paths
  std::string yuv;
  std::string yuv_desc;
  int synthetic = 0;
  std::size_t synthetic_size = 96;
  std::uint64_t synthetic_seed = 1000;
};

struct NamedPlane {
  std::string name;       // image label
  std::string component;  // Y, U or V
  Plane plane;
};

struct Options {
  std::string preset = "desk";
  std::string log_path;

  struct {
    ImageSource src;
    std::vector<int> qps{22, 27, 32, 37};
    std::size_t patch_size = 35;
    std::uint64_t seed = 1;
    std::string out;
  } dataset;

  struct {
    std::string data;
    std::string out;
    std::string train_log;
    std::string init;
    int only_qp = 0;
    NetworkConfig net;
    TrainConfig train;
    std::string optimizer;
  } train;

  struct {
    std::string model;
    std::string out;
    double threshold = 1e-3;
    std::vector<std::size_t> counts;
    std::string report;
  } prune;

  struct {
    std::string model;
    std::string out;
    double energy = 0.95;
    std::string report;
  } lowrank;

  struct {
    std::string model;
    std::string out;
    std::string calib;
    std::size_t calib_limit = 0;
    std::string fl_table = "estimate";
    std::string fl_out;
    int finetune_epochs = 0;
    std::string data;
    TrainConfig train;
    std::string optimizer;
  } quantize;

  struct {
    std::string model;
    std::string input;
    std::string yuv_desc;
    int qp = 32;
    std::string out;
    bool dfp = false;
    int threads = 1;
    std::string arithmetic = "integer";
  } infer;

  struct {
    std::string model;
    ImageSource src;
    std::vector<int> qps{22, 27, 32, 37};
    std::string out_dir;
    bool dfp = false;
    int threads = 1;
  } eval;

  struct {
    std::string model;
    std::string vectors;
    std::vector<int> threads{1};
    bool generate = false;
    ImageSource src;
    std::vector<int> qps{22, 37};
    std::string report;
  } verify;

  struct {
    std::string model;
  } hash;
};

void apply_preset(Options& o, const std::string& preset) {
  if (preset == "desk") {
    o.train.train = TrainConfig::desk();
    o.train.net.base_filters = 16;
  } else if (preset == "paper") {
    o.train.train = TrainConfig::paper();
    o.train.net = NetworkConfig{};
  } else {
    fail(ErrorCode::kInvalidArgument, "unknown preset '" + preset + "' (expected desk or paper)");
  }
  o.train.optimizer = to_string(o.train.train.optimizer);
  o.quantize.train = o.train.train;
  o.quantize.train.lr_decay_epoch = -1;
  o.quantize.optimizer = o.train.optimizer;
}

void add_image_source(CLI::App* app, ImageSource& src) {
  app->add_option("--images", src.images, "Input PGM images");
  app->add_option("--yuv", src.yuv, "Raw planar YUV 4:2:0 input");
  app->add_option("--yuv-desc", src.yuv_desc, "Sidecar descriptor for --yuv");
  app->add_option("--synthetic", src.synthetic, "Number of generated images")->capture_default_str();
  app->add_option("--synthetic-size", src.synthetic_size, "Side of generated images")->capture_default_str();
  app->add_option("--synthetic-seed", src.synthetic_seed, "Seed of the first generated image")
      ->capture_default_str();
}

// The epoch count is left out when the command has its own.
void add_train_options(CLI::App* app, TrainConfig& t, std::string& optimizer, bool with_epochs) {
  app->add_option("--optimizer", optimizer, "sgd or adam")->capture_default_str();
  app->add_option("--batch", t.batch_size, "Batch size M")->capture_default_str();
  app->add_option("--lr", t.base_lr, "Base learning rate")->capture_default_str();
  app->add_option("--lambda-w", t.lambda_w, "Weight-norm regularizer weight")->capture_default_str();
  app->add_option("--lambda-s", t.lambda_s, "BN-scale regularizer weight")->capture_default_str();
  app->add_option("--lambda-lda", t.lambda_lda, "Filter-similarity regularizer weight")->capture_default_str();
  if (with_epochs) app->add_option("--epochs", t.epochs, "Training epochs")->capture_default_str();
  app->add_option("--clip", t.grad_clip_norm, "Global gradient-norm clip")->capture_default_str();
  app->add_option("--decay-epoch", t.lr_decay_epoch, "Epoch of the lr decay (-1: none)")->capture_default_str();
  app->add_option("--decay-factor", t.lr_decay_factor, "lr decay factor")->capture_default_str();
  app->add_option("--seed", t.seed, "Seed for initialization and data order")->capture_default_str();
}

void build_app(CLI::App& app, Options& o) {
  app.set_config("--config", "", "Read options from an INI/TOML run config");
  app.add_option("--preset", o.preset, "Hyperparameter preset: desk or paper")->capture_default_str();
  app.add_option("--log", o.log_path, "Also append log records to this file");
  app.require_subcommand(1);
  app.fallthrough();

  auto* ds = app.add_subcommand("dataset", "Encode images and cut training patches");
  add_image_source(ds, o.dataset.src);
  ds->add_option("--qps", o.dataset.qps, "QPs to encode at")->delimiter(',')->capture_default_str();
  ds->add_option("--patch-size", o.dataset.patch_size, "Patch side")->capture_default_str();
  ds->add_option("--seed", o.dataset.seed, "Shuffle seed")->capture_default_str();
  ds->add_option("--out", o.dataset.out, "Output patch set")->required();

  auto* tr = app.add_subcommand("train", "Train a float model");
  tr->add_option("--data", o.train.data, "Patch set")->required();
  tr->add_option("--out", o.train.out, "Output model")->required();
  tr->add_option("--train-log", o.train.train_log, "Per-step TSV log (default <out>.train.tsv)");
  tr->add_option("--init", o.train.init, "Continue from this float model");
  tr->add_option("--only-qp", o.train.only_qp, "Train on patches of this QP only (0: all)")->capture_default_str();
  tr->add_option("--layers", o.train.net.num_conv_layers, "Conv layers")->capture_default_str();
  tr->add_option("--kernel", o.train.net.kernel_size, "Kernel size")->capture_default_str();
  tr->add_option("--filters", o.train.net.base_filters, "Filters per hidden layer")->capture_default_str();
  tr->add_option("--qp-map", o.train.net.use_qp_map, "Feed the QP map as a second input")->capture_default_str();
  tr->add_option("--prune-interval", o.train.train.prune_interval, "Prune every N epochs (0: never)")
      ->capture_default_str();
  tr->add_option("--prune-threshold", o.train.train.prune_threshold, "BN-scale prune threshold")
      ->capture_default_str();
  add_train_options(tr, o.train.train, o.train.optimizer, true);

  auto* pr = app.add_subcommand("prune", "Remove filters by BN scale with bias folding");
  pr->add_option("--model", o.prune.model, "Float model with BN")->required();
  pr->add_option("--out", o.prune.out, "Output model")->required();
  pr->add_option("--threshold", o.prune.threshold, "Prune |gamma| below this")->capture_default_str();
  pr->add_option("--counts", o.prune.counts, "Keep exactly these filter counts per layer")->delimiter(',');
  pr->add_option("--report", o.prune.report, "JSON report (default <out>.prune.json)");

  auto* lr = app.add_subcommand("lowrank", "Fold BN and replace layers by SVD low-rank pairs");
  lr->add_option("--model", o.lowrank.model, "Float model")->required();
  lr->add_option("--out", o.lowrank.out, "Output model")->required();
  lr->add_option("--energy", o.lowrank.energy, "Fraction of spectral energy to keep")->capture_default_str();
  lr->add_option("--report", o.lowrank.report, "JSON report (default <out>.lowrank.json)");

  auto* qz = app.add_subcommand("quantize", "Build the FL table and emit a DFP model");
  qz->add_option("--model", o.quantize.model, "Float model")->required();
  qz->add_option("--out", o.quantize.out, "Output DFP model")->required();
  qz->add_option("--calib", o.quantize.calib, "Calibration patch set");
  qz->add_option("--calib-limit", o.quantize.calib_limit, "Use at most this many patches (0: all)")
      ->capture_default_str();
  qz->add_option("--fl-table", o.quantize.fl_table, "estimate or reference")->capture_default_str();
  qz->add_option("--fl-out", o.quantize.fl_out, "FL table JSON (default <out>.fl.json)");
  qz->add_option("--finetune-epochs", o.quantize.finetune_epochs, "Quantization-aware fine-tune epochs")
      ->capture_default_str();
  qz->add_option("--data", o.quantize.data, "Fine-tune patch set (default: --calib)");
  add_train_options(qz, o.quantize.train, o.quantize.optimizer, false);

  auto* in = app.add_subcommand("infer", "Filter one image");
  in->add_option("--model", o.infer.model, "Model file")->required();
  in->add_option("--input", o.infer.input, "PGM image, or raw YUV with --yuv-desc")->required();
  in->add_option("--yuv-desc", o.infer.yuv_desc, "Descriptor when --input is YUV");
  in->add_option("--qp", o.infer.qp, "QP of the reconstruction")->capture_default_str();
  in->add_option("--out", o.infer.out, "Output image")->required();
  in->add_flag("--dfp", o.infer.dfp, "Integer DFP inference (model must be DFP)");
  in->add_option("--threads", o.infer.threads, "Worker threads")->capture_default_str();
  in->add_option("--arithmetic", o.infer.arithmetic, "integer or float-sim")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "RD curves and BD-rate against the unfiltered anchor");
  ev->add_option("--model", o.eval.model, "Model file")->required();
  add_image_source(ev, o.eval.src);
  ev->add_option("--qps", o.eval.qps, "QPs")->delimiter(',')->capture_default_str();
  ev->add_option("--out-dir", o.eval.out_dir, "Directory for CSVs and report")->required();
  ev->add_flag("--dfp", o.eval.dfp, "Integer DFP inference (model must be DFP)");
  ev->add_option("--threads", o.eval.threads, "Worker threads")->capture_default_str();

  auto* vf = app.add_subcommand("verify", "Replay conformance vectors, or generate them");
  vf->add_option("--model", o.verify.model, "DFP model")->required();
  vf->add_option("--vectors", o.verify.vectors, "Conformance file")->required();
  vf->add_option("--threads", o.verify.threads, "Thread counts to replay with")->delimiter(',')
      ->capture_default_str();
  vf->add_flag("--generate", o.verify.generate, "Write vectors instead of checking them");
  add_image_source(vf, o.verify.src);
  vf->add_option("--qps", o.verify.qps, "QPs for --generate")->delimiter(',')->capture_default_str();
  vf->add_option("--report", o.verify.report, "JSON report");

  auto* hs = app.add_subcommand("hash", "Print the SHA-256 of a model's canonical serialization");
  hs->add_option("--model", o.hash.model, "Model file")->required();
}

// ---------------------------------------------------------------------------

std::string file_digest(const std::string& path) { return to_hex(sha256(read_file(path))); }

void check_not_input(const std::string& out, const std::vector<std::string>& inputs) {
  std::error_code ec;
  const fs::path o = fs::weakly_canonical(out, ec);
  for (const std::string& in : inputs) {
    if (in.empty()) continue;
    if (fs::weakly_canonical(in, ec) == o) {
      fail(ErrorCode::kInvalidArgument, "output '" + out + "' would overwrite input '" + in + "'");
    }
  }
}

// Writes the resolved run config next to an artifact. Inputs are listed with
// their SHA-256 as comments so the run can be replayed and checked.
void write_run_config(const CLI::App& app, const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& inputs, Log& log) {
  std::ofstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot write run config '" + path + "'");
  f << "# loopfilter resolved run config\n";
  for (const auto& [role, file] : inputs) {
    if (!file.empty()) f << "# input " << role << " " << file << " sha256=" << file_digest(file) << "\n";
  }
  // Keep the global keys and the active command's section; unset paths are
  // dropped so the file replays through --config.
  const std::string section = app.get_subcommands().front()->get_name() + ".";
  std::istringstream all(app.config_to_str(true, false));
  for (std::string line; std::getline(all, line);) {
    const std::string key = line.substr(0, line.find('='));
    if (line.ends_with("=\"\"")) continue;
    if (key.find('.') == std::string::npos || key.starts_with(section)) f << line << '\n';
  }
  if (!f) fail(ErrorCode::kIo, "cannot write run config '" + path + "'");
  log("config").kv("path", path);
}

std::vector<NamedPlane> load_images(const ImageSource& src, bool luma_only) {
  std::vector<NamedPlane> planes;
  for (const std::string& p : src.images) planes.push_back({p, "Y", read_pgm(p)});
  if (!src.yuv.empty()) {
    if (src.yuv_desc.empty()) fail(ErrorCode::kInvalidArgument, "--yuv requires --yuv-desc");
    const YuvDescriptor desc = read_yuv_descriptor(src.yuv_desc);
    const std::vector<YuvFrame> frames = read_yuv420(src.yuv, desc);
    for (std::size_t f = 0; f < frames.size(); ++f) {
      const std::string name = src.yuv + "#" + std::to_string(f);
      planes.push_back({name, "Y", frames[f].y});
      if (!luma_only) {
        planes.push_back({name, "U", frames[f].u});
        planes.push_back({name, "V", frames[f].v});
      }
    }
  }
  if (src.synthetic < 0) fail(ErrorCode::kInvalidArgument, "--synthetic must be >= 0");
  for (int i = 0; i < src.synthetic; ++i) {
    const std::uint64_t seed = src.synthetic_seed + static_cast<std::uint64_t>(i);
    planes.push_back({"synthetic:" + std::to_string(seed), "Y",
                      synthetic_image(src.synthetic_size, src.synthetic_size, seed)});
  }
  if (planes.empty()) fail(ErrorCode::kInvalidArgument, "no input images (use --images, --yuv or --synthetic)");
  return planes;
}

std::vector<std::pair<std::string, std::string>> image_inputs(const ImageSource& src) {
  std::vector<std::pair<std::string, std::string>> v;
  for (const std::string& p : src.images) v.emplace_back("image", p);
  v.emplace_back("yuv", src.yuv);
  v.emplace_back("yuv-desc", src.yuv_desc);
  return v;
}

void log_train_step(Log& log, const StepRecord& r) {
  log("train_step")
      .kv("epoch", r.epoch)
      .kv("step", r.step)
      .kv("lr", r.lr)
      .kv("mse", r.loss.mse)
      .kv("total", r.loss.total);
}

TrainCallbacks training_callbacks(Log& log, std::ofstream& tsv) {
  TrainCallbacks cb;
  cb.on_step = [&log, &tsv](const StepRecord& r) {
    tsv << format_log_record(r) << '\n';
    if (r.step % 50 == 0) log_train_step(log, r);
  };
  cb.on_epoch = [&log](int epoch, const LossBreakdown& l) {
    log("epoch")
        .kv("epoch", epoch)
        .kv("mse", l.mse)
        .kv("reg_w", l.reg_w)
        .kv("reg_s", l.reg_s)
        .kv("reg_lda", l.reg_lda)
        .kv("total", l.total);
  };
  return cb;
}

std::ofstream open_train_log(const std::string& path) {
  std::ofstream tsv(path);
  if (!tsv) fail(ErrorCode::kIo, "cannot write training log '" + path + "'");
  tsv << kTrainLogHeader << '\n';
  return tsv;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot write '" + path + "'");
  f << j.dump(2) << '\n';
  if (!f) fail(ErrorCode::kIo, "cannot write '" + path + "'");
}

json fl_table_json(const FLTable& t) {
  json j;
  j["fl_concat"] = t.fl_concat;
  j["fl_sum"] = t.fl_sum;
  for (const LayerFL& l : t.layers) j["layers"].push_back({{"fl_w", l.fl_w}, {"fl_b", l.fl_b}, {"fl_o", l.fl_o}});
  return j;
}

void log_model(Log& log, const char* event, const std::string& path, const Digest& digest) {
  log(event).kv("path", path).kv("sha256", to_hex(digest));
}

// ---------------------------------------------------------------------------

int cmd_dataset(const Options& o, const CLI::App& app, Log& log) {
  const auto& d = o.dataset;
  check_not_input(d.out, d.src.images);
  const std::vector<NamedPlane> named = load_images(d.src, false);
  std::vector<Plane> planes;
  for (const NamedPlane& p : named) planes.push_back(p.plane);
  const PatchSet set = make_dataset(planes, d.qps, d.patch_size, d.seed);
  for (const std::string& w : set.warnings) log("warning").kv("message", w);
  save_patch_set(set, d.out);
  log("dataset").kv("images", planes.size()).kv("patches", set.patches.size()).kv("out", d.out);
  write_run_config(app, d.out + ".config.ini", image_inputs(d.src), log);
  return kExitOk;
}

int cmd_train(const Options& o, const CLI::App& app, Log& log) {
  const auto& t = o.train;
  check_not_input(t.out, {t.data, t.init});
  TrainConfig tc = t.train;
  tc.optimizer = parse_optimizer(t.optimizer);
  tc.validate();

  PatchSet set = load_patch_set(t.data);
  if (t.only_qp != 0) {
    std::erase_if(set.patches, [&](const Patch& p) { return p.qp != t.only_qp; });
    if (set.patches.empty()) {
      fail(ErrorCode::kInvalidArgument, "no patches with qp " + std::to_string(t.only_qp));
    }
  }
  const std::vector<TrainingSample> samples = to_training_samples(set);

  NetworkModel model;
  if (!t.init.empty()) {
    model = load_float_model(t.init);
  } else {
    NetworkConfig nc = t.net;
    nc.bit_depth = set.patches.front().decoded.bit_depth;
    model = build_cnnf(nc, tc.seed);
  }
  log("train_start")
      .kv("samples", samples.size())
      .kv("params", model.parameter_count())
      .kv("optimizer", to_string(tc.optimizer))
      .kv("epochs", tc.epochs);

  const std::string tsv_path = t.train_log.empty() ? t.out + ".train.tsv" : t.train_log;
  std::ofstream tsv = open_train_log(tsv_path);
  const TrainResult result = train(std::move(model), samples, tc, training_callbacks(log, tsv));
  save_model(result.model, t.out);
  log_model(log, "model", t.out, model_hash(result.model));
  write_run_config(app, t.out + ".config.ini", {{"data", t.data}, {"init", t.init}}, log);
  return kExitOk;
}

int cmd_prune(const Options& o, const CLI::App& app, Log& log) {
  const auto& p = o.prune;
  check_not_input(p.out, {p.model});
  const NetworkModel model = load_float_model(p.model);
  const PruneResult r = p.counts.empty() ? prune_by_bn_scale(model, p.threshold) : prune_to_counts(model, p.counts);
  for (const std::string& w : r.report.warnings) log("warning").kv("message", w);
  save_model(r.model, p.out);
  const std::string report = p.report.empty() ? p.out + ".prune.json" : p.report;
  std::ofstream(report) << prune_report_json(r.report) << '\n';
  log("prune")
      .kv("params_before", r.report.params_before)
      .kv("params_after", r.report.params_after)
      .kv("ratio", r.report.parameter_ratio())
      .kv("report", report);
  log_model(log, "model", p.out, model_hash(r.model));
  write_run_config(app, p.out + ".config.ini", {{"model", p.model}}, log);
  return kExitOk;
}

int cmd_lowrank(const Options& o, const CLI::App& app, Log& log) {
  const auto& l = o.lowrank;
  check_not_input(l.out, {l.model});
  NetworkModel model = load_float_model(l.model);
  if (model.has_batchnorm()) model = fold_batchnorm(model);
  const LowRankResult r = decompose_model(model, l.energy);
  save_model(r.model, l.out);
  json j;
  j["energy_keep"] = l.energy;
  j["ranks"] = r.report.ranks;
  j["params_before"] = r.report.params_before;
  j["params_after"] = r.report.params_after;
  const std::string report = l.report.empty() ? l.out + ".lowrank.json" : l.report;
  write_json(j, report);
  log("lowrank")
      .kv("params_before", r.report.params_before)
      .kv("params_after", r.report.params_after)
      .kv("report", report);
  log_model(log, "model", l.out, model_hash(r.model));
  write_run_config(app, l.out + ".config.ini", {{"model", l.model}}, log);
  return kExitOk;
}

std::vector<CalibrationItem> calibration_items(const PatchSet& set, std::size_t limit) {
  std::vector<CalibrationItem> items;
  for (const Patch& p : set.patches) {
    if (limit != 0 && items.size() == limit) break;
    items.push_back({p.decoded, p.qp});
  }
  return items;
}

int cmd_quantize(const Options& o, const CLI::App& app, Log& log) {
  const auto& q = o.quantize;
  check_not_input(q.out, {q.model, q.calib, q.data});
  NetworkModel model = load_float_model(q.model);
  if (model.has_batchnorm()) model = fold_batchnorm(model);

  FLTable table;
  if (q.fl_table == "reference") {
    table = FLTable::reference();
    table.validate(model.layers.size());
  } else if (q.fl_table == "estimate") {
    if (q.calib.empty()) fail(ErrorCode::kInvalidArgument, "--fl-table estimate needs --calib");
    const PatchSet calib = load_patch_set(q.calib);
    const std::vector<CalibrationItem> items = calibration_items(calib, q.calib_limit);
    table = build_fl_table(model, items);
    log("calibration").kv("items", items.size());
  } else {
    fail(ErrorCode::kInvalidArgument, "--fl-table must be estimate or reference");
  }

  if (q.finetune_epochs > 0) {
    const std::string data = q.data.empty() ? q.calib : q.data;
    if (data.empty()) fail(ErrorCode::kInvalidArgument, "fine-tuning needs --data or --calib");
    TrainConfig tc = q.train;
    tc.epochs = q.finetune_epochs;
    tc.optimizer = parse_optimizer(q.optimizer);
    tc.prune_interval = 0;
    const std::vector<TrainingSample> samples = to_training_samples(load_patch_set(data));
    const std::string tsv_path = q.out + ".finetune.tsv";
    std::ofstream tsv = open_train_log(tsv_path);
    model = quant_aware_finetune(std::move(model), samples, table, tc, training_callbacks(log, tsv)).model;
  }

  const DfpModel dfp = quantize_model(model, table);
  save_model(dfp, q.out);
  const std::string fl_path = q.fl_out.empty() ? q.out + ".fl.json" : q.fl_out;
  write_json(fl_table_json(table), fl_path);
  for (std::size_t i = 0; i < table.layers.size(); ++i) {
    log("fl")
        .kv("layer", i + 1)
        .kv("fl_w", table.layers[i].fl_w)
        .kv("fl_b", table.layers[i].fl_b)
        .kv("fl_o", table.layers[i].fl_o);
  }
  log_model(log, "model", q.out, model_hash(dfp));
  write_run_config(app, q.out + ".config.ini", {{"model", q.model}, {"calib", q.calib}, {"data", q.data}}, log);
  return kExitOk;
}

DfpOptions dfp_options(int threads, const std::string& arithmetic = "integer") {
  if (threads < 1) fail(ErrorCode::kInvalidArgument, "--threads must be >= 1");
  DfpOptions opt;
  opt.threads = threads;
  if (arithmetic == "integer") {
    opt.arithmetic = DfpArithmetic::kInteger;
  } else if (arithmetic == "float-sim") {
    opt.arithmetic = DfpArithmetic::kFloatSimulated;
  } else {
    fail(ErrorCode::kInvalidArgument, "--arithmetic must be integer or float-sim");
  }
  return opt;
}

// A loaded model plus the way to run it.
struct Filter {
  AnyModel model;
  bool dfp = false;
  DfpOptions options;

  Plane operator()(const Plane& plane, int qp) const {
    if (dfp) return dfp_forward(std::get<DfpModel>(model), plane, qp, options);
    return filter_plane(std::get<NetworkModel>(model), plane, qp);
  }
};

Filter load_filter(const std::string& path, bool dfp, const DfpOptions& options) {
  Filter f{load_model(path), dfp, options};
  const bool is_dfp = std::holds_alternative<DfpModel>(f.model);
  if (dfp && !is_dfp) fail(ErrorCode::kInvalidArgument, "--dfp given but '" + path + "' is a float model");
  if (!dfp && is_dfp) fail(ErrorCode::kInvalidArgument, "'" + path + "' is a DFP model; pass --dfp");
  return f;
}

int cmd_infer(const Options& o, const CLI::App& app, Log& log) {
  const auto& i = o.infer;
  check_not_input(i.out, {i.model, i.input, i.yuv_desc});
  const Filter filter = load_filter(i.model, i.dfp, dfp_options(i.threads, i.arithmetic));
  if (i.yuv_desc.empty()) {
    const Plane out = filter(read_pgm(i.input), i.qp);
    write_pgm(out, i.out);
  } else {
    const YuvDescriptor desc = read_yuv_descriptor(i.yuv_desc);
    std::vector<YuvFrame> frames = read_yuv420(i.input, desc);
    for (YuvFrame& f : frames) {
      f.y = filter(f.y, i.qp);
      f.u = filter(f.u, i.qp);
      f.v = filter(f.v, i.qp);
    }
    write_yuv420(frames, i.out);
  }
  log("infer").kv("out", i.out).kv("sha256", file_digest(i.out)).kv("path", i.dfp ? "dfp" : "float");
  write_run_config(app, i.out + ".config.ini", {{"model", i.model}, {"input", i.input}, {"yuv-desc", i.yuv_desc}},
                   log);
  return kExitOk;
}

int cmd_eval(const Options& o, const CLI::App& app, Log& log) {
  const auto& e = o.eval;
  if (e.qps.size() < 4) fail(ErrorCode::kInvalidArgument, "eval needs at least 4 QPs for BD-rate");
  const Filter filter = load_filter(e.model, e.dfp, dfp_options(e.threads));
  const std::vector<NamedPlane> planes = load_images(e.src, false);
  fs::create_directories(e.out_dir);

  // Per component and QP: total bits, pixels and squared errors.
  struct Acc {
    double bits = 0.0, pixels = 0.0, se_anchor = 0.0, se_test = 0.0;
    int max_value = 255;
  };
  std::map<std::string, std::map<int, Acc>> acc;
  auto sq_err = [](const Plane& a, const Plane& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.samples.size(); ++k) {
      const double d = static_cast<double>(a.samples[k]) - b.samples[k];
      s += d * d;
    }
    return s;
  };
  for (const NamedPlane& p : planes) {
    for (int qp : e.qps) {
      const EncodeResult enc = encode_intra_plane(p.plane, qp);
      const Plane filtered = filter(enc.recon, qp);
      Acc& a = acc[p.component][qp];
      a.bits += enc.bits;
      a.pixels += static_cast<double>(p.plane.samples.size());
      a.se_anchor += sq_err(p.plane, enc.recon);
      a.se_test += sq_err(p.plane, filtered);
      a.max_value = p.plane.max_value();
      log("eval_point")
          .kv("image", p.name)
          .kv("component", p.component)
          .kv("qp", qp)
          .kv("bpp", enc.bits / static_cast<double>(p.plane.samples.size()))
          .kv("psnr_anchor", psnr(p.plane, enc.recon))
          .kv("psnr_filtered", psnr(p.plane, filtered));
    }
  }

  auto to_psnr = [](double se, double pixels, int max_value) {
    if (se == 0.0) return kPsnrCap;
    const double peak = static_cast<double>(max_value);
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak * pixels / se));
  };
  json report;
  report["model"] = e.model;
  report["model_sha256"] = file_digest(e.model);
  report["path"] = e.dfp ? "dfp" : "float";
  for (const auto& [component, per_qp] : acc) {
    std::vector<RDRow> anchor, test;
    RDCurve ca, ct;
    for (const auto& [qp, a] : per_qp) {
      const double bpp = a.bits / a.pixels;
      anchor.push_back({qp, {bpp, to_psnr(a.se_anchor, a.pixels, a.max_value)}});
      test.push_back({qp, {bpp, to_psnr(a.se_test, a.pixels, a.max_value)}});
      ca.push_back(anchor.back().point);
      ct.push_back(test.back().point);
    }
    write_rd_csv(anchor, fs::path(e.out_dir) / ("anchor_" + component + ".csv"));
    write_rd_csv(test, fs::path(e.out_dir) / ("filtered_" + component + ".csv"));
    const double bd = bd_rate(ca, ct);
    report["bd_rate_percent"][component] = bd;
    log("bd_rate").kv("component", component).kv("percent", bd);
  }
  const std::string report_path = (fs::path(e.out_dir) / "report.json").string();
  write_json(report, report_path);
  auto inputs = image_inputs(e.src);
  inputs.emplace_back("model", e.model);
  write_run_config(app, (fs::path(e.out_dir) / "eval.config.ini").string(), inputs, log);
  return kExitOk;
}

int cmd_verify(const Options& o, const CLI::App& app, Log& log) {
  const auto& v = o.verify;
  const DfpModel model = load_dfp_model(v.model);
  const Digest digest = model_hash(model);

  if (v.generate) {
    check_not_input(v.vectors, {v.model});
    std::vector<CorpusItem> corpus;
    for (const NamedPlane& p : load_images(v.src, true)) {
      for (int qp : v.qps) corpus.push_back({encode_intra_plane(p.plane, qp).recon, qp});
    }
    const ConformanceSuite suite = make_conformance_suite(model, digest, corpus);
    save_conformance(suite, v.vectors);
    log("vectors").kv("count", suite.vectors.size()).kv("corpus_sha256", to_hex(suite.corpus_hash));
    auto inputs = image_inputs(v.src);
    inputs.emplace_back("model", v.model);
    write_run_config(app, v.vectors + ".config.ini", inputs, log);
    return kExitOk;
  }

  const ConformanceSuite suite = load_conformance(v.vectors);
  if (suite.model_digest != digest) {
    fail(ErrorCode::kVerification, "model digest " + to_hex(digest) + " does not match the vectors' " +
                                       to_hex(suite.model_digest));
  }
  if (v.threads.empty()) fail(ErrorCode::kInvalidArgument, "--threads needs at least one value");
  json report;
  report["model_sha256"] = to_hex(digest);
  report["vectors"] = suite.vectors.size();
  std::optional<Digest> first;
  for (int t : v.threads) {
    const Digest h = check_conformance(model, suite, dfp_options(t));
    log("verify").kv("threads", t).kv("vectors", suite.vectors.size()).kv("hash", to_hex(h)).kv("result", "PASS");
    report["runs"].push_back({{"threads", t}, {"hash", to_hex(h)}});
    if (first && *first != h) fail(ErrorCode::kVerification, "hash differs across thread counts");
    first = h;
  }
  if (!v.report.empty()) {
    check_not_input(v.report, {v.model, v.vectors});
    write_json(report, v.report);
    write_run_config(app, v.report + ".config.ini", {{"model", v.model}, {"vectors", v.vectors}}, log);
  }
  return kExitOk;
}

int cmd_hash(const Options& o, Log& log) {
  const AnyModel m = load_model(o.hash.model);
  const Digest d = std::visit([](const auto& model) { return model_hash(model); }, m);
  log("hash")
      .kv("path", o.hash.model)
      .kv("kind", std::holds_alternative<DfpModel>(m) ? "dfp" : "float")
      .kv("algorithm", kHashAlgorithm)
      .kv("sha256", to_hex(d));
  return kExitOk;
}

int dispatch(const Options& o, const CLI::App& app, Log& log) {
  const CLI::App* sub = app.get_subcommands().front();
  const std::string& name = sub->get_name();
  if (name == "dataset") return cmd_dataset(o, app, log);
  if (name == "train") return cmd_train(o, app, log);
  if (name == "prune") return cmd_prune(o, app, log);
  if (name == "lowrank") return cmd_lowrank(o, app, log);
  if (name == "quantize") return cmd_quantize(o, app, log);
  if (name == "infer") return cmd_infer(o, app, log);
  if (name == "eval") return cmd_eval(o, app, log);
  if (name == "verify") return cmd_verify(o, app, log);
  if (name == "hash") return cmd_hash(o, log);
  fail(ErrorCode::kInvalidArgument, "unknown command '" + name + "'");
}

// CLI11 parses from the back of a reversed argument vector.
std::vector<std::string> reversed_args(const std::vector<std::string>& args) {
  std::vector<std::string> v(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(v.begin(), v.end());
  return v;
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
      return kExitUsage;
    case ErrorCode::kIo:
      return kExitIo;
    case ErrorCode::kFormat:
    case ErrorCode::kVersion:
      return kExitFormat;
    case ErrorCode::kVerification:
      return kExitVerification;
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kNonFinite:
      return kExitFailure;
  }
  return kExitFailure;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  // Two passes: the first only learns the preset, the second parses against
  // that preset's defaults so the emitted config is fully resolved.
  std::string preset = "desk";
  for (int pass = 0; pass < 2; ++pass) {
    Options o;
    CLI::App app("Deterministic CNN loop filter: train, compress, quantize, run and verify", "loopfilter");
    try {
      apply_preset(o, preset);
      build_app(app, o);
      std::vector<std::string> argv = reversed_args(args);
      app.parse(argv);
      if (pass == 0 && o.preset != preset) {
        preset = o.preset;
        continue;
      }
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    } catch (const Error& e) {
      err << "error: " << e.what() << '\n';
      return exit_code_for(e.code());
    }

    try {
      Log log(out, o.log_path);
      return dispatch(o, app, log);
    } catch (const Error& e) {
      err << "error[" << to_string(e.code()) << "]: " << e.what() << '\n';
      return exit_code_for(e.code());
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitFailure;
    }
  }
  return kExitFailure;
}

}  // namespace loopfilter::cli
