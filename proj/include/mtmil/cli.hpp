// Copyright 2026 The mtmil Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Command-line front end: preprocess, synth, train, eval, predict, heatmap.
//
// Exit codes: 0 success, 1 other failure, 2 no eye disk found, 3 corrupt or
// unreadable checkpoint, 4 unreadable image, 64 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mtmil/checkpoint.hpp"
#include "mtmil/config.hpp"
#include "mtmil/datasets.hpp"
#include "mtmil/evaluate.hpp"
#include "mtmil/heatmap.hpp"
#include "mtmil/png_io.hpp"
#include "mtmil/preproc.hpp"
#include "mtmil/synth.hpp"
#include "mtmil/train.hpp"

namespace mtmil::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitNoDisk = 2;
inline constexpr int kExitCheckpoint = 3;
inline constexpr int kExitImage = 4;
inline constexpr int kExitUsage = 64;

namespace fs = std::filesystem;
using nlohmann::json;

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::string config;
};

namespace detail {

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline fs::path need_out(const Globals& g) {
  if (g.out.empty()) throw CLI::RequiredError("--out");
  fs::create_directories(g.out);
  return g.out;
}

inline RawFundusImage read_raw(const fs::path& p) {
  return {io::read_png(p, 3), p.stem().string()};
}

inline json disk_json(const DiskGeometry& d) {
  return {{"center_row", d.center_row}, {"center_col", d.center_col}, {"radius", d.radius}};
}

inline void write_preprocessed(const fs::path& dir, const PreprocessedImage& p) {
  io::write_png(dir / (p.source_id + ".png"), to_u8(p.image));
  io::write_mask_png(dir / (p.source_id + ".mask.png"), p.retina_mask);
}

// Preprocessed image and retina mask, either computed from a raw fundus
// photograph or read back from a preprocess output.
inline PreprocessedImage load_input(const fs::path& p, bool preprocessed, int frame) {
  if (preprocessed) {
    PreprocessedImage img = load_preprocessed(p, p.stem().string());
    if (img.frame() != frame)
      throw InvalidArgument("preprocessed image frame differs from the model frame");
    return img;
  }
  PreprocessOptions opt;
  opt.frame = frame;
  return preprocess(read_raw(p), opt);
}

}  // namespace detail

// ---- preprocess -------------------------------------------------------------

struct PreprocessArgs {
  std::string input;      // single image
  std::string input_dir;  // data root
  std::string manifest;   // defaults to <input_dir>/manifest.csv
  int frame = 512;
};

// Writes <id>.png and <id>.mask.png per accepted image into --out. A data
// root also yields manifest.csv, masks/<folder>/<id>.png in the output frame,
// a copy of splits.csv, rejected.csv and preprocess.json, so the output is
// itself a preprocessed data root.
inline int cmd_preprocess(const Globals& g, const PreprocessArgs& a, std::ostream& out) {
  if (a.input.empty() == a.input_dir.empty())
    throw InvalidArgument("preprocess needs exactly one of --input and --input-dir");
  const fs::path dst = detail::need_out(g);
  PreprocessOptions opt;
  opt.frame = a.frame;
  if (!a.input_dir.empty()) {
    const fs::path in(a.input_dir);
    const fs::path manifest = a.manifest.empty() ? in / "manifest.csv" : fs::path(a.manifest);
    const auto records = load_manifest(manifest, true);
    std::vector<GradeRecord> kept;
    json disks = json::object();
    std::ofstream rejected(dst / "rejected.csv");
    if (!rejected) throw IoError("cannot write rejected.csv");
    rejected << "source_id,reason\n";
    size_t n_rejected = 0;
    for (const auto& rec : records) {
      const RawFundusImage raw = load_raw(resolve(in, rec.image_path), rec.source_id);
      PreprocessedImage p;
      try {
        p = preprocess(raw, opt);
      } catch (const DiskNotFound& e) {
        rejected << rec.source_id << ",\"" << e.what() << "\"\n";
        ++n_rejected;
        continue;
      }
      detail::write_preprocessed(dst, p);
      for (const char* folder : kMaskFolders) {
        const fs::path mp = in / "masks" / folder / (rec.source_id + ".png");
        if (!fs::exists(mp)) continue;
        const Mask raw_mask = io::read_mask_png(mp);
        if (raw_mask.height != raw.pixels.height || raw_mask.width != raw.pixels.width)
          throw ShapeError("mask " + mp.string() + " does not match its image");
        fs::create_directories(dst / "masks" / folder);
        io::write_mask_png(dst / "masks" / folder / (rec.source_id + ".png"),
                           preprocess_masks(raw_mask, p.disk, p.retina_mask));
      }
      GradeRecord r = rec;
      r.image_path = rec.source_id + ".png";
      kept.push_back(r);
      disks[rec.source_id] = detail::disk_json(p.disk);
    }
    write_manifest(dst / "manifest.csv", kept);
    if (fs::exists(in / "splits.csv"))
      fs::copy_file(in / "splits.csv", dst / "splits.csv",
                    fs::copy_options::overwrite_existing);
    detail::write_json(dst / "preprocess.json",
                       {{"frame", a.frame}, {"processed", kept.size()},
                        {"rejected", n_rejected}, {"disks", disks}});
    out << "preprocessed " << kept.size() << " images, rejected " << n_rejected
        << " -> " << dst.string() << '\n';
    return kExitOk;
  }
  const fs::path in(a.input);
  const RawFundusImage raw = detail::read_raw(in);
  try {
    const PreprocessedImage p = preprocess(raw, opt);
    detail::write_preprocessed(dst, p);
    out << json{{"source_id", p.source_id}, {"disk", detail::disk_json(p.disk)}}.dump()
        << '\n';
    return kExitOk;
  } catch (const DiskNotFound& e) {
    out << json{{"source_id", raw.source_id}, {"rejected", true}, {"reason", e.what()}}
               .dump()
        << '\n';
    return kExitNoDisk;
  }
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  int n = 0;
  int frame = 512;
  double test_fraction = 0.0;
  double positive_fraction = 0.5;
  double mild_fraction = 0.125;
};

inline int cmd_synth(const Globals& g, const SynthArgs& a, std::ostream& out) {
  const fs::path dst = detail::need_out(g);
  SynthOptions so;
  so.frame = a.frame;
  so.positive_fraction = a.positive_fraction;
  so.mild_fraction = a.mild_fraction;
  const auto samples = synth_render(a.n, g.seed, so);
  write_synth(dst, samples, a.test_fraction);
  out << "wrote " << samples.size() << " synthetic images -> " << dst.string() << '\n';
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data_root;
  bool preprocessed = false;
  std::optional<std::string> mode;
  std::optional<int> epochs, patch_size, k_train, frame;
  std::optional<std::int64_t> max_steps;
  std::optional<double> overlap, learning_rate;
};

inline TrainConfig train_config(const Globals& g, const TrainArgs& a) {
  TrainConfig cfg;
  if (!g.config.empty()) apply_config(load_key_values(g.config), cfg);
  if (g.seed_set) cfg.seed = g.seed;
  if (a.mode) cfg.mode = parse_mode(*a.mode);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.patch_size) cfg.patches.patch_size = cfg.net.patch_size = *a.patch_size;
  if (a.k_train) cfg.patches.k_train = *a.k_train;
  if (a.overlap) cfg.patches.overlap = *a.overlap;
  if (a.learning_rate) cfg.learning_rate = *a.learning_rate;
  if (a.frame) cfg.frame = *a.frame;
  cfg.validate();
  return cfg;
}

inline Dataset load_data(const std::string& root, bool preprocessed, int frame) {
  DataOptions opt;
  opt.preprocessed = preprocessed;
  opt.preprocess.frame = frame;
  Dataset ds = load_dataset(root, opt);
  for (const auto& [role, split] : ds.splits)
    for (const auto& ex : split.examples)
      if (ex.image.frame() != frame)
        throw InvalidArgument("image " + ex.image.source_id + " is not in the " +
                              std::to_string(frame) + " frame");
  return ds;
}

inline int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  const TrainConfig cfg = train_config(g, a);
  const Dataset ds = load_data(a.data_root, a.preprocessed, cfg.frame);
  const fs::path dst = detail::need_out(g);
  TrainData data;
  data.clf_train = ds.find(SplitRole::kClfTrain);
  data.clf_val = ds.find(SplitRole::kClfVal);
  data.seg_train = ds.find(SplitRole::kSegTrain);
  std::ofstream log(dst / "train_log.jsonl");
  if (!log) throw IoError("cannot write training log");
  const TrainResult res = train(cfg, data, &log);
  CheckpointMeta meta{res.best_epoch, res.steps, res.best_val_auc};
  save_checkpoint(dst / "model.ckpt", res.net, cfg.patches, cfg.frame, meta);
  json summary = {{"mode", mode_name(cfg.mode)},
                  {"steps", res.steps},
                  {"epochs_run", res.history.size()},
                  {"best_epoch", res.best_epoch},
                  {"best_val_auc", res.best_val_auc ? json(*res.best_val_auc) : json(nullptr)},
                  {"rejected", ds.rejected}};
  detail::write_json(dst / "train_summary.json", summary);
  out << "trained " << res.steps << " steps (" << mode_name(cfg.mode) << "), best epoch "
      << res.best_epoch << " -> " << (dst / "model.ckpt").string() << '\n';
  return kExitOk;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data_root;
  bool preprocessed = false;
  std::string split;
  std::string threshold_source = "train";
  std::optional<double> overlap;
};

inline const DatasetSplit& pick_split(const Dataset& ds, const std::string& name) {
  if (!name.empty()) {
    const auto role = parse_role(name);
    if (!role) throw InvalidArgument("unknown split " + name);
    const DatasetSplit* s = ds.find(*role);
    if (!s || s->empty()) throw InvalidArgument("split " + name + " is empty");
    return *s;
  }
  for (auto r : {SplitRole::kClfTest, SplitRole::kSegTest, SplitRole::kClfTrain})
    if (const DatasetSplit* s = ds.find(r); s && !s->empty()) return *s;
  throw InvalidArgument("data root has no evaluable split");
}

inline int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  const ThresholdSource src = ThresholdSource::parse(a.threshold_source);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  PatchSpec spec = ck.patches;
  if (a.overlap) spec.overlap = *a.overlap;
  spec.validate(ck.frame);
  const Dataset ds = load_data(a.data_root, a.preprocessed, ck.frame);
  const fs::path dst = detail::need_out(g);
  const DatasetSplit& test = pick_split(ds, a.split);
  std::array<double, kLesionChannels> thr;
  thr.fill(src.fixed);
  if (src.from_train) {
    const DatasetSplit* tr = ds.find(SplitRole::kSegTrain);
    if (!tr || tr->empty()) tr = ds.find(SplitRole::kClfTrain);
    if (tr) thr = select_thresholds(ck.net, *tr, spec);
  }
  const EvalReport rep = evaluate(ck.net, test, spec, thr, src.str());
  json j = to_json(rep);
  j["split"] = role_name(test.role);
  j["checkpoint"] = {{"epoch", ck.meta.epoch}, {"step", ck.meta.step}};
  detail::write_json(dst / "report.json", j);
  out << "evaluated " << rep.n_images << " images, auc ";
  if (rep.roc) {
    out << rep.roc->auc;
  } else {
    out << "n/a";
  }
  out << " -> " << (dst / "report.json").string() << '\n';
  return kExitOk;
}

// ---- predict / heatmap ------------------------------------------------------

struct ImageArgs {
  std::string checkpoint;
  std::string image;
  bool preprocessed = false;
};

inline int cmd_predict(const Globals& g, const ImageArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const fs::path in(a.image);
  json rec;
  int code = kExitOk;
  try {
    const PreprocessedImage img = detail::load_input(in, a.preprocessed, ck.frame);
    const PatchBag bag = extract_grid(img, ck.patches);
    const auto res = ck.net.forward_bag(bag, false);
    rec = {{"source_id", img.source_id},
           {"rdr_prob", static_cast<double>(res.rdr_prob)},
           {"k_patches", bag.size()}};
  } catch (const DiskNotFound& e) {
    rec = {{"source_id", in.stem().string()}, {"rejected", true}, {"reason", e.what()}};
    code = kExitNoDisk;
  } catch (const EmptyBag& e) {
    rec = {{"source_id", in.stem().string()}, {"rejected", true}, {"reason", e.what()}};
    code = kExitNoDisk;
  }
  out << rec.dump() << '\n';
  if (!g.out.empty()) {
    const fs::path dst = detail::need_out(g);
    detail::write_json(dst / (rec["source_id"].get<std::string>() + ".json"), rec);
  }
  return code;
}

inline int cmd_heatmap(const Globals& g, const ImageArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const PreprocessedImage img =
      detail::load_input(a.image, a.preprocessed, ck.frame);
  const fs::path dst = detail::need_out(g);
  const PatchBag bag = extract_grid(img, ck.patches);
  const auto res = ck.net.forward_bag(bag, true);
  const StitchedMaps maps = stitch(res, ck.frame);
  const std::string id = img.source_id;
  const char* names[kLesionChannels] = {"ma", "he", "ex"};
  for (int ch = 0; ch < kLesionChannels; ++ch)
    io::write_png(dst / (id + ".lesion-" + names[ch] + ".png"),
                  map_to_u8(maps.lesion_map, ch));
  io::write_png(dst / (id + ".attention.png"), map_to_u8(maps.attention_map));
  io::write_png(dst / (id + ".overlay.png"), overlay(img.image, maps.attention_map));
  out << json{{"source_id", id},
              {"rdr_prob", static_cast<double>(res.rdr_prob)},
              {"k_patches", bag.size()}}
             .dump()
      << '\n';
  return kExitOk;
}

// ---- dispatch ---------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Multi-task MIL for referable diabetic retinopathy", "mtmil"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out,--output-dir", g.out, "Output directory");
  app.add_option("--config", g.config, "Flat key = value config file");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Preprocess a fundus image or data root");
  pre->add_option("--input", pa.input, "Single PNG image");
  pre->add_option("--input-dir", pa.input_dir, "Data root with manifest.csv");
  pre->add_option("--manifest", pa.manifest, "Manifest CSV (default <input-dir>/manifest.csv)");
  pre->add_option("--frame", pa.frame, "Output frame side");

  SynthArgs sa;
  auto* syn = app.add_subcommand("synth", "Write a synthetic data root");
  syn->add_option("--n", sa.n, "Number of images")->required();
  syn->add_option("--frame", sa.frame, "Image side");
  syn->add_option("--test-fraction", sa.test_fraction, "Share assigned to test splits");
  syn->add_option("--positive-fraction", sa.positive_fraction, "Share of grade-2 images");
  syn->add_option("--mild-fraction", sa.mild_fraction, "Share of grade-1 images");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model");
  trn->add_option("--data-root", ta.data_root, "Data root")->required();
  trn->add_flag("--preprocessed", ta.preprocessed, "Data root holds preprocessed frames");
  trn->add_option("--mode", ta.mode, "multi_task, clf_only or seg_only");
  trn->add_option("--epochs", ta.epochs, "Epochs");
  trn->add_option("--max-steps", ta.max_steps, "Step cap (0 = none)");
  trn->add_option("--patch-size", ta.patch_size, "Patch side d");
  trn->add_option("--overlap", ta.overlap, "Grid overlap t for validation");
  trn->add_option("--k-train", ta.k_train, "Random patches per training bag");
  trn->add_option("--learning-rate,--lr", ta.learning_rate, "Adam learning rate");
  trn->add_option("--frame", ta.frame, "Preprocessed frame side");

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
  evl->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evl->add_option("--data-root", ea.data_root, "Data root")->required();
  evl->add_flag("--preprocessed", ea.preprocessed, "Data root holds preprocessed frames");
  evl->add_option("--split", ea.split, "Split to evaluate");
  evl->add_option("--threshold-source", ea.threshold_source, "train or fixed:x");
  evl->add_option("--overlap", ea.overlap, "Grid overlap t");

  ImageArgs pra;
  auto* prd = app.add_subcommand("predict", "rDR probability for one image");
  prd->add_option("--checkpoint", pra.checkpoint, "Checkpoint file")->required();
  prd->add_option("--image", pra.image, "PNG image")->required();
  prd->add_flag("--preprocessed", pra.preprocessed, "Image is a preprocessed frame");

  ImageArgs ha;
  auto* hmp = app.add_subcommand("heatmap", "Lesion and attention maps for one image");
  hmp->add_option("--checkpoint", ha.checkpoint, "Checkpoint file")->required();
  hmp->add_option("--image", ha.image, "PNG image")->required();
  hmp->add_flag("--preprocessed", ha.preprocessed, "Image is a preprocessed frame");

  for (auto* sub : {pre, syn, trn, evl, prd, hmp}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  try {
    if (!g.config.empty() && !trn->parsed()) {
      // Validated for every command, applied by train only.
      TrainConfig unused;
      apply_config(load_key_values(g.config), unused);
    }
    if (pre->parsed()) return cmd_preprocess(g, pa, out);
    if (syn->parsed()) return cmd_synth(g, sa, out);
    if (trn->parsed()) return cmd_train(g, ta, out);
    if (evl->parsed()) return cmd_eval(g, ea, out);
    if (prd->parsed()) return cmd_predict(g, pra, out);
    if (hmp->parsed()) return cmd_heatmap(g, ha, out);
  } catch (const CLI::RequiredError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DiskNotFound& e) {
    err << "error: " << e.what() << '\n';
    return kExitNoDisk;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitImage;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mtmil::cli
