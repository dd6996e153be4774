#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pseudoseg/dataset.hpp"
#include "pseudoseg/digest.hpp"
#include "pseudoseg/error.hpp"
#include "pseudoseg/imaging.hpp"
#include "pseudoseg/metrics.hpp"
#include "pseudoseg/modelmath.hpp"
#include "pseudoseg/parallel.hpp"
#include "pseudoseg/png_io.hpp"
#include "pseudoseg/pseudolabel.hpp"

namespace pseudoseg::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolName = "pseudoseg";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kValidation = 1, kExternal = 2 };

// Geometric and photometric augmentation settings for `augment`.
struct AugmentParams {
  JitterParams jitter{0.015, 0.7, 0.4, 0};
  bool hflip = true;
  bool vflip = true;
  double translate = 0.1;  // max shift as a fraction of width/height
  double scale = 0.5;      // factor drawn from [1 - scale, 1 + scale]

  void validate() const {
    jitter.validate();
    if (!(translate >= 0.0 && translate <= 1.0)) throw ContractError("augment.translate must lie in [0,1]");
    if (!(scale >= 0.0 && scale < 1.0)) throw ContractError("augment.scale must lie in [0,1)");
  }
};

struct PipelineConfig {
  // Paths exactly as written; resolve() makes them absolute against base_dir.
  std::string labeled;
  std::string unlabeled_images;
  std::string unlabeled_manifest;
  std::string output_dir;
  fs::path base_dir = ".";

  EnhanceChain chain = EnhanceChain::soft;
  EnhanceParams enhance;
  AugmentParams augment;
  AdapterSpec adapter;
  ThresholdPolicy threshold;
  bool pre_inference_enhance = false;
  double iou_threshold = 0.5;
  GainCoefficients gains;
  std::uint64_t seed = 0;

  fs::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  // Effective settings as JSON. Paths stay as written, so the digest does
  // not depend on where the tree is checked out.
  Json to_json() const {
    Json adapter_json = {{"mode", adapter.mode == AdapterSpec::Mode::exec ? "exec" : "file"},
                         {"path", adapter.path},
                         {"command", adapter.command},
                         {"timeout", adapter.timeout_seconds}};
    return {
        {"seed", seed},
        {"paths",
         {{"labeled", labeled},
          {"unlabeled_images", unlabeled_images},
          {"unlabeled_manifest", unlabeled_manifest},
          {"output_dir", output_dir}}},
        {"enhance",
         {{"chain", std::string(to_string(chain))},
          {"clahe_clip_limit", enhance.clahe_clip_limit},
          {"clahe_tiles", {enhance.clahe_tiles.x, enhance.clahe_tiles.y}},
          {"median_kernel", enhance.median_kernel},
          {"unsharp_sigma", enhance.unsharp_sigma},
          {"unsharp_amount", enhance.unsharp_amount}}},
        {"augment",
         {{"hue_gain", augment.jitter.hue_gain},
          {"sat_gain", augment.jitter.sat_gain},
          {"val_gain", augment.jitter.val_gain},
          {"hflip", augment.hflip},
          {"vflip", augment.vflip},
          {"translate", augment.translate},
          {"scale", augment.scale}}},
        {"adapter", adapter_json},
        {"threshold", {{"tau", threshold.tau}}},
        {"pseudo_label", {{"pre_inference_enhance", pre_inference_enhance}}},
        {"eval", {{"iou_threshold", iou_threshold}}},
        {"loss",
         {{"lambda_b", gains.lambda_b},
          {"lambda_c", gains.lambda_c},
          {"lambda_s", gains.lambda_s},
          {"lambda_f", gains.lambda_f}}},
    };
  }

  std::string digest() const { return sha256_hex(to_json().dump()); }

  void validate() const {
    enhance.validate();
    augment.validate();
    if (!(adapter.timeout_seconds > 0.0)) throw ContractError("adapter.timeout must be positive");
    threshold.validate();
    gains.validate();
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
      throw ContractError("eval.iou_threshold must lie in (0,1]");
    }
  }
};

namespace detail {

template <typename T>
void read_opt(const Json& obj, const char* key, T& out, const std::string& section) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: " + section + "." + key + " has the wrong type");
  }
}

inline const Json& section(const Json& doc, const char* name) {
  static const Json empty = Json::object();
  auto it = doc.find(name);
  if (it == doc.end()) return empty;
  if (!it->is_object()) throw ValidationError(std::string("config: \"") + name + "\" must be an object");
  return *it;
}

}  // namespace detail

inline PipelineConfig parse_config(std::string_view text, const fs::path& base_dir) {
  const Json doc = pseudoseg::detail::parse_json_text(text);
  if (!doc.is_object()) throw ValidationError("config must be a JSON object");
  static const std::set<std::string> known = {"seed",    "paths",     "enhance",      "augment",
                                              "adapter", "threshold", "pseudo_label", "eval",
                                              "loss"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!known.count(it.key())) throw ValidationError("config: unknown key \"" + it.key() + "\"");
  }
  PipelineConfig c;
  c.base_dir = base_dir;
  detail::read_opt(doc, "seed", c.seed, "");

  const Json& paths = detail::section(doc, "paths");
  detail::read_opt(paths, "labeled", c.labeled, "paths");
  detail::read_opt(paths, "unlabeled_images", c.unlabeled_images, "paths");
  detail::read_opt(paths, "unlabeled_manifest", c.unlabeled_manifest, "paths");
  detail::read_opt(paths, "output_dir", c.output_dir, "paths");

  const Json& en = detail::section(doc, "enhance");
  std::string chain = std::string(to_string(c.chain));
  detail::read_opt(en, "chain", chain, "enhance");
  c.chain = parse_chain(chain);
  detail::read_opt(en, "clahe_clip_limit", c.enhance.clahe_clip_limit, "enhance");
  if (auto t = en.find("clahe_tiles"); t != en.end()) {
    if (!t->is_array() || t->size() != 2 || !(*t)[0].is_number_integer() || !(*t)[1].is_number_integer()) {
      throw ValidationError("config: enhance.clahe_tiles must be [tx, ty]");
    }
    c.enhance.clahe_tiles = {(*t)[0].get<int>(), (*t)[1].get<int>()};
  }
  detail::read_opt(en, "median_kernel", c.enhance.median_kernel, "enhance");
  detail::read_opt(en, "unsharp_sigma", c.enhance.unsharp_sigma, "enhance");
  detail::read_opt(en, "unsharp_amount", c.enhance.unsharp_amount, "enhance");

  const Json& aug = detail::section(doc, "augment");
  detail::read_opt(aug, "hue_gain", c.augment.jitter.hue_gain, "augment");
  detail::read_opt(aug, "sat_gain", c.augment.jitter.sat_gain, "augment");
  detail::read_opt(aug, "val_gain", c.augment.jitter.val_gain, "augment");
  detail::read_opt(aug, "hflip", c.augment.hflip, "augment");
  detail::read_opt(aug, "vflip", c.augment.vflip, "augment");
  detail::read_opt(aug, "translate", c.augment.translate, "augment");
  detail::read_opt(aug, "scale", c.augment.scale, "augment");

  const Json& ad = detail::section(doc, "adapter");
  std::string mode = "file";
  detail::read_opt(ad, "mode", mode, "adapter");
  if (mode == "exec") {
    c.adapter.mode = AdapterSpec::Mode::exec;
  } else if (mode != "file") {
    throw ValidationError("config: adapter.mode must be \"file\" or \"exec\"");
  }
  detail::read_opt(ad, "path", c.adapter.path, "adapter");
  detail::read_opt(ad, "command", c.adapter.command, "adapter");
  detail::read_opt(ad, "timeout", c.adapter.timeout_seconds, "adapter");

  detail::read_opt(detail::section(doc, "threshold"), "tau", c.threshold.tau, "threshold");
  detail::read_opt(detail::section(doc, "pseudo_label"), "pre_inference_enhance",
                   c.pre_inference_enhance, "pseudo_label");
  detail::read_opt(detail::section(doc, "eval"), "iou_threshold", c.iou_threshold, "eval");

  const Json& loss = detail::section(doc, "loss");
  detail::read_opt(loss, "lambda_b", c.gains.lambda_b, "loss");
  detail::read_opt(loss, "lambda_c", c.gains.lambda_c, "loss");
  detail::read_opt(loss, "lambda_s", c.gains.lambda_s, "loss");
  detail::read_opt(loss, "lambda_f", c.gains.lambda_f, "loss");
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  const fs::path p(path);
  return parse_config(read_file(path), p.has_parent_path() ? p.parent_path() : fs::path("."));
}

// ISO-8601 UTC. SOURCE_DATE_EPOCH, when set, pins the value.
inline std::string timestamp_utc() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde) {
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Line-oriented JSON log records on the error stream.
class Logger {
 public:
  explicit Logger(std::ostream& err) : err_(err) {}

  void log(const char* level, const std::string& msg, Json fields = Json::object()) {
    fields["level"] = level;
    fields["msg"] = msg;
    err_ << fields.dump() << '\n';
  }
  void info(const std::string& msg, Json fields = Json::object()) { log("info", msg, std::move(fields)); }
  void error(const std::string& msg, Json fields = Json::object()) { log("error", msg, std::move(fields)); }

 private:
  std::ostream& err_;
};

// Flags every command accepts. Unset optionals leave the config untouched.
struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<std::string> chain;
  std::optional<double> iou_threshold;
  unsigned jobs = 1;
  bool dry_run = false;
};

inline void add_common_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "Pipeline config (JSON)");
  cmd->add_option("--seed", f.seed, "Override the config seed");
  cmd->add_option("--tau", f.tau, "Override the pseudo-label confidence threshold");
  cmd->add_option("--chain", f.chain, "Override the enhancement chain (none|soft|final)");
  cmd->add_option("--iou-threshold", f.iou_threshold, "Override the evaluation IoU threshold");
  cmd->add_option("--jobs", f.jobs, "Worker threads")->check(CLI::Range(1u, 1024u));
  cmd->add_flag("--dry-run", f.dry_run, "Validate and report the plan without writing files");
}

inline PipelineConfig effective_config(const CommonFlags& f) {
  PipelineConfig c = f.config_path.empty() ? PipelineConfig{} : load_config(f.config_path);
  if (f.seed) c.seed = *f.seed;
  if (f.tau) c.threshold.tau = *f.tau;
  if (f.chain) c.chain = parse_chain(*f.chain);
  if (f.iou_threshold) c.iou_threshold = *f.iou_threshold;
  c.validate();
  return c;
}

inline Json base_provenance(const PipelineConfig& c, const std::string& command) {
  return {{"tool", kToolName},
          {"tool_version", kToolVersion},
          {"command", command},
          {"config_sha256", c.digest()},
          {"seed", c.seed},
          {"created_at", timestamp_utc()}};
}

inline void require_exists(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ValidationError(what + " is not set");
  if (!fs::exists(p)) throw ValidationError(what + " does not exist: " + p.string());
}

inline std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Json enhance_params_json(const PipelineConfig& c) { return c.to_json()["enhance"]; }

// ---------------------------------------------------------------------------
// enhance

struct FileOutcome {
  std::string file;
  std::string input_sha256;
  std::string output_sha256;
  std::string error;
};

inline int cmd_enhance(const PipelineConfig& c, const fs::path& in_dir, const fs::path& out_dir,
                       unsigned jobs, bool dry_run, Logger& log) {
  require_exists(in_dir, "input directory");
  const auto files = list_pngs(in_dir);
  if (dry_run) {
    log.info("dry run", {{"command", "enhance"}, {"files", files.size()},
                         {"chain", std::string(to_string(c.chain))}, {"out_dir", out_dir.string()}});
    return kOk;
  }
  fs::create_directories(out_dir);
  std::vector<FileOutcome> outcomes(files.size());
  parallel_for(files.size(), jobs, [&](std::size_t i) {
    FileOutcome& o = outcomes[i];
    o.file = files[i].filename().string();
    const fs::path target = out_dir / files[i].filename();
    try {
      const std::string bytes = read_file(files[i].string());
      o.input_sha256 = sha256_hex(bytes);
      if (c.chain == EnhanceChain::none) {
        write_file(target.string(), bytes);
      } else {
        write_png(target.string(), enhance(read_png(files[i].string()), c.chain, c.enhance));
      }
      o.output_sha256 = file_sha256(target.string());
    } catch (const Error& e) {
      o.error = e.what();
    }
  });

  Json prov = base_provenance(c, "enhance");
  prov["chain"] = std::string(to_string(c.chain));
  prov["params"] = enhance_params_json(c);
  Json list = Json::array();
  int failures = 0;
  for (const auto& o : outcomes) {
    if (o.error.empty()) {
      list.push_back({{"file", o.file}, {"input_sha256", o.input_sha256}, {"output_sha256", o.output_sha256}});
    } else {
      ++failures;
      log.error("could not process image", {{"file", o.file}, {"error", o.error}});
      list.push_back({{"file", o.file}, {"error", o.error}});
    }
  }
  prov["files"] = list;
  write_file((out_dir / "enhance_provenance.json").string(), prov.dump(2) + "\n");
  log.info("enhance finished", {{"processed", outcomes.size() - failures}, {"failed", failures}});
  return failures ? kValidation : kOk;
}

// ---------------------------------------------------------------------------
// augment

// Random draws for one image. All values are drawn every time, in a fixed
// order, so enabling or disabling one transform leaves the others alone.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  double dx = 0.0, dy = 0.0;
  double scale = 1.0;
  HsvFactors hsv;

  std::vector<GeometricTransform> chain() const {
    std::vector<GeometricTransform> out;
    if (scale != 1.0) out.push_back(GeometricTransform::scale(scale));
    if (dx != 0.0 || dy != 0.0) out.push_back(GeometricTransform::translate(dx, dy));
    if (hflip) out.push_back(GeometricTransform::hflip());
    if (vflip) out.push_back(GeometricTransform::vflip());
    return out;
  }

  Json to_json() const {
    return {{"hflip", hflip}, {"vflip", vflip}, {"dx", dx}, {"dy", dy}, {"scale", scale},
            {"hue_shift", hsv.hue_shift}, {"sat_scale", hsv.sat_scale}, {"val_scale", hsv.val_scale}};
  }
};

inline AugmentDraw draw_augment(const AugmentParams& p, std::uint64_t seed, const ImageRecord& im) {
  StreamRng rng(seed, static_cast<std::uint64_t>(im.id));
  AugmentDraw d;
  const double u_h = rng.uniform();
  const double u_v = rng.uniform();
  const double u_dx = rng.uniform(-1.0, 1.0);
  const double u_dy = rng.uniform(-1.0, 1.0);
  const double u_s = rng.uniform(-1.0, 1.0);
  d.hflip = p.hflip && u_h < 0.5;
  d.vflip = p.vflip && u_v < 0.5;
  d.dx = std::round(u_dx * p.translate * im.width);
  d.dy = std::round(u_dy * p.translate * im.height);
  d.scale = 1.0 + u_s * p.scale;
  d.hsv = draw_hsv_factors(p.jitter, rng);
  return d;
}

// Grayscale images only take the value factor: with zero saturation, hue
// and saturation changes have no effect.
inline ImageBuffer apply_photometric(const ImageBuffer& img, const HsvFactors& f) {
  if (img.channels == 3) return hsv_adjust(img, f);
  const ImageBuffer rgb = hsv_adjust(gray_to_rgb(img), f);
  ImageBuffer out(img.width, img.height, 1);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = rgb.data[3 * i];
  return out;
}

inline int cmd_augment(const PipelineConfig& c, const fs::path& dataset_path, const fs::path& images_dir,
                       const fs::path& out_dir, unsigned jobs, bool dry_run, Logger& log) {
  require_exists(dataset_path, "dataset");
  require_exists(images_dir, "image directory");
  const Dataset d = parse_dataset(read_file(dataset_path.string()));
  for (const auto& im : d.images) require_exists(images_dir / im.file_name, "image");
  if (dry_run) {
    log.info("dry run", {{"command", "augment"}, {"images", d.images.size()}, {"out_dir", out_dir.string()}});
    return kOk;
  }
  fs::create_directories(out_dir / "images");
  std::map<std::int64_t, std::vector<const Annotation*>> by_image;
  for (const auto& a : d.annotations) by_image[a.image_id].push_back(&a);

  std::vector<std::vector<Annotation>> kept(d.images.size());
  std::vector<Json> draws(d.images.size());
  parallel_for(d.images.size(), jobs, [&](std::size_t i) {
    const ImageRecord& im = d.images[i];
    const AugmentDraw draw = draw_augment(c.augment, c.seed, im);
    const auto chain = draw.chain();
    const AxisAffine m = compose(chain, im);
    ImageBuffer img = read_png((images_dir / im.file_name).string());
    if (img.width != im.width || img.height != im.height) {
      throw ValidationError("image " + std::to_string(im.id) + ": file size differs from dataset record");
    }
    img = apply_photometric(warp_image(img, m), draw.hsv);
    const fs::path target = out_dir / "images" / im.file_name;
    fs::create_directories(target.parent_path());
    write_png(target.string(), img);
    if (auto it = by_image.find(im.id); it != by_image.end()) {
      for (const auto* a : it->second) {
        if (auto t = transform_annotation(*a, m, im)) kept[i].push_back(std::move(*t));
      }
    }
    draws[i] = draw.to_json();
    draws[i]["image_id"] = im.id;
  });

  Dataset out;
  out.images = d.images;
  out.categories = d.categories;
  for (auto& v : kept) for (auto& a : v) out.annotations.push_back(std::move(a));
  out.provenance = base_provenance(c, "augment");
  out.provenance["input_sha256"] = content_sha256(d);
  out.provenance["params"] = c.to_json()["augment"];
  out.provenance["draws"] = draws;
  write_file((out_dir / "augmented.json").string(), write_dataset(out));
  log.info("augment finished", {{"images", out.images.size()},
                                {"annotations_in", d.annotations.size()},
                                {"annotations_out", out.annotations.size()}});
  return kOk;
}

// ---------------------------------------------------------------------------
// pseudo-label

inline int cmd_pseudo_label(const PipelineConfig& c, unsigned jobs, bool dry_run, Logger& log) {
  const fs::path labeled_path = c.resolve(c.labeled);
  const fs::path manifest_path = c.resolve(c.unlabeled_manifest);
  const fs::path images_dir = c.resolve(c.unlabeled_images);
  const fs::path out_dir = c.resolve(c.output_dir);
  require_exists(labeled_path, "paths.labeled");
  require_exists(manifest_path, "paths.unlabeled_manifest");
  require_exists(images_dir, "paths.unlabeled_images");
  if (out_dir.empty()) throw ValidationError("paths.output_dir is not set");
  if (c.adapter.mode == AdapterSpec::Mode::file) require_exists(c.resolve(c.adapter.path), "adapter.path");

  const Dataset labeled = parse_dataset(read_file(labeled_path.string()));
  const std::vector<ImageRecord> images = parse_manifest(read_file(manifest_path.string()));
  for (const auto& im : images) require_exists(images_dir / im.file_name, "unlabeled image");

  if (dry_run) {
    log.info("dry run", {{"command", "pseudo-label"}, {"images", images.size()},
                         {"tau", c.threshold.tau}, {"out_dir", out_dir.string()}});
    return kOk;
  }
  fs::create_directories(out_dir);

  // The adapter sees absolute paths, optionally of enhanced copies.
  std::vector<ImageRecord> adapter_images = images;
  if (c.pre_inference_enhance) {
    const fs::path enhanced_dir = out_dir / "pre_inference";
    fs::create_directories(enhanced_dir);
    parallel_for(images.size(), jobs, [&](std::size_t i) {
      const fs::path target = enhanced_dir / images[i].file_name;
      fs::create_directories(target.parent_path());
      write_png(target.string(), enhance(read_png((images_dir / images[i].file_name).string()), c.chain, c.enhance));
      adapter_images[i].file_name = fs::absolute(target).string();
    });
  } else {
    for (auto& im : adapter_images) im.file_name = fs::absolute(images_dir / im.file_name).string();
  }

  AdapterSpec spec = c.adapter;
  if (spec.mode == AdapterSpec::Mode::file) spec.path = c.resolve(spec.path).string();
  const auto preds = run_inference_adapter(spec, adapter_images, out_dir / "adapter");
  const auto kept = filter_predictions(preds, c.threshold);
  Dataset pseudo = predictions_to_dataset(kept, images, labeled.categories);
  pseudo.provenance = base_provenance(c, "pseudo-label");
  pseudo.provenance["pseudo_label"] = {{"tau", c.threshold.tau},
                                       {"adapter_mode", spec.mode == AdapterSpec::Mode::exec ? "exec" : "file"},
                                       {"pre_inference_enhance", c.pre_inference_enhance},
                                       {"predictions", preds.size()},
                                       {"kept", kept.size()},
                                       {"images", images.size()}};
  write_file((out_dir / "pseudo.json").string(), write_dataset(pseudo));
  log.info("pseudo-label finished", {{"predictions", preds.size()}, {"kept", kept.size()},
                                     {"images", images.size()}});
  return kOk;
}

// ---------------------------------------------------------------------------
// merge / evaluate / avg-weights / loss

inline int cmd_merge(const PipelineConfig& c, const fs::path& labeled_path, const fs::path& pseudo_path,
                     const fs::path& out_path, bool dry_run, Logger& log) {
  require_exists(labeled_path, "labeled dataset");
  require_exists(pseudo_path, "pseudo dataset");
  const Dataset labeled = parse_dataset(read_file(labeled_path.string()));
  const Dataset pseudo = parse_dataset(read_file(pseudo_path.string()));
  Dataset merged = merge_datasets(labeled, pseudo);
  if (dry_run) {
    log.info("dry run", {{"command", "merge"}, {"images", merged.images.size()},
                         {"annotations", merged.annotations.size()}});
    return kOk;
  }
  Json prov = base_provenance(c, "merge");
  prov["merge"] = merged.provenance["merge"];
  merged.provenance = prov;
  write_file(out_path.string(), write_dataset(merged));
  log.info("merge finished", {{"images", merged.images.size()}, {"annotations", merged.annotations.size()}});
  return kOk;
}

inline int cmd_evaluate(const PipelineConfig& c, const fs::path& pred_path, const fs::path& gt_path,
                        const fs::path& out_path, const std::string& csv_path, unsigned jobs,
                        bool dry_run, std::ostream& out, Logger& log) {
  require_exists(pred_path, "prediction dataset");
  require_exists(gt_path, "ground-truth dataset");
  const std::string pred_text = read_file(pred_path.string());
  const std::string gt_text = read_file(gt_path.string());
  const Dataset pred = parse_dataset(pred_text), gt = parse_dataset(gt_text);
  const EvalReport r = evaluate(pred, gt, c.iou_threshold, jobs);
  out << "micro_f1=" << pseudoseg::detail::fixed6(r.micro_f1) << "\n"
      << "macro_f1=" << pseudoseg::detail::fixed6(r.macro_f1) << "\n"
      << "map50=" << pseudoseg::detail::fixed6(r.map50) << "\n";
  if (dry_run) return kOk;
  Json prov = base_provenance(c, "evaluate");
  prov["pred_sha256"] = content_sha256(pred);
  prov["gt_sha256"] = content_sha256(gt);
  write_file(out_path.string(), write_report(r, prov));
  if (!csv_path.empty()) write_file(csv_path, write_report_csv(r));
  log.info("evaluate finished", {{"micro_f1", r.micro_f1}, {"macro_f1", r.macro_f1}, {"map50", r.map50}});
  return kOk;
}

inline int cmd_avg_weights(const PipelineConfig& c, const std::vector<std::string>& paths,
                           const fs::path& out_path, bool dry_run, Logger& log) {
  std::vector<Checkpoint> ckpts;
  Json inputs = Json::array();
  for (const auto& p : paths) {
    require_exists(p, "checkpoint");
    const std::string text = read_file(p);
    ckpts.push_back(parse_checkpoint(text));
    inputs.push_back(sha256_hex(text));
  }
  const Checkpoint avg = average_checkpoints(ckpts);
  if (dry_run) {
    log.info("dry run", {{"command", "avg-weights"}, {"inputs", paths.size()}, {"tensors", avg.tensors.size()}});
    return kOk;
  }
  Json prov = base_provenance(c, "avg-weights");
  prov["inputs_sha256"] = inputs;
  write_file(out_path.string(), write_checkpoint(avg, prov));
  log.info("avg-weights finished", {{"inputs", paths.size()}, {"tensors", avg.tensors.size()}});
  return kOk;
}

inline std::string shortest(double v) { return Json(v).dump(); }

inline int cmd_loss(const PipelineConfig& c, const std::vector<double>& components,
                    const std::vector<double>& gains, std::ostream& out) {
  if (components.size() != 4) throw ValidationError("loss: --components needs four values l_c,l_f,l_s,l_b");
  GainCoefficients g = c.gains;
  if (!gains.empty()) {
    if (gains.size() != 4) throw ValidationError("loss: --gains needs four values lambda_c,lambda_f,lambda_s,lambda_b");
    g = {gains[3], gains[0], gains[2], gains[1]};
  }
  const LossComponents lc{components[0], components[1], components[2], components[3]};
  out << "loss=" << shortest(composite_loss(lc, g)) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Logger log(err);
  CLI::App app{"Cross-task pseudo-label curation toolkit for instance segmentation", kToolName};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonFlags flags;
  std::string in_dir, out_dir, dataset_path, images_dir, csv_path, out_path;
  std::string labeled_path, pseudo_path, pred_path, gt_path;
  std::vector<std::string> ckpt_paths;
  std::vector<double> components, gains;

  auto* enhance_cmd = app.add_subcommand("enhance", "Apply an enhancement chain to every PNG in a directory");
  add_common_flags(enhance_cmd, flags);
  enhance_cmd->add_option("--in", in_dir, "Input image directory")->required();
  enhance_cmd->add_option("--out", out_dir, "Output image directory")->required();

  auto* augment_cmd = app.add_subcommand("augment", "Seeded geometric and HSV augmentation of a dataset");
  add_common_flags(augment_cmd, flags);
  augment_cmd->add_option("--dataset", dataset_path, "COCO-style dataset")->required();
  augment_cmd->add_option("--images", images_dir, "Directory holding the dataset images")->required();
  augment_cmd->add_option("--out", out_dir, "Output directory")->required();

  auto* pseudo_cmd = app.add_subcommand("pseudo-label", "Run the adapter, filter by confidence, write the pseudo dataset");
  add_common_flags(pseudo_cmd, flags);

  auto* merge_cmd = app.add_subcommand("merge", "Disjoint union of a labeled and a pseudo-labeled dataset");
  add_common_flags(merge_cmd, flags);
  merge_cmd->add_option("labeled", labeled_path, "Labeled dataset")->required();
  merge_cmd->add_option("pseudo", pseudo_path, "Pseudo-labeled dataset")->required();
  merge_cmd->add_option("out", out_path, "Merged dataset")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "F1 and mAP@50 of predictions against ground truth");
  add_common_flags(eval_cmd, flags);
  eval_cmd->add_option("predictions", pred_path, "Prediction dataset (annotations carry scores)")->required();
  eval_cmd->add_option("ground_truth", gt_path, "Ground-truth dataset")->required();
  eval_cmd->add_option("out", out_path, "Report JSON")->required();
  eval_cmd->add_option("--csv", csv_path, "Also write a per-class CSV table");

  auto* avg_cmd = app.add_subcommand("avg-weights", "Element-wise mean of checkpoints");
  add_common_flags(avg_cmd, flags);
  avg_cmd->add_option("checkpoints", ckpt_paths, "Checkpoint JSON files")->required();
  avg_cmd->add_option("-o,--out", out_path, "Averaged checkpoint")->required();

  auto* loss_cmd = app.add_subcommand("loss", "Weighted composite loss from component values");
  add_common_flags(loss_cmd, flags);
  loss_cmd->add_option("--components", components, "l_c,l_f,l_s,l_b")->delimiter(',')->required();
  loss_cmd->add_option("--gains", gains, "lambda_c,lambda_f,lambda_s,lambda_b")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream cli_out, cli_err;
    const int rc = app.exit(e, cli_out, cli_err);
    out << cli_out.str();
    if (!cli_err.str().empty()) log.error(cli_err.str());
    return rc == 0 ? kOk : kValidation;
  }

  try {
    const PipelineConfig c = effective_config(flags);
    if (*enhance_cmd) return cmd_enhance(c, in_dir, out_dir, flags.jobs, flags.dry_run, log);
    if (*augment_cmd) return cmd_augment(c, dataset_path, images_dir, out_dir, flags.jobs, flags.dry_run, log);
    if (*pseudo_cmd) return cmd_pseudo_label(c, flags.jobs, flags.dry_run, log);
    if (*merge_cmd) return cmd_merge(c, labeled_path, pseudo_path, out_path, flags.dry_run, log);
    if (*eval_cmd) return cmd_evaluate(c, pred_path, gt_path, out_path, csv_path, flags.jobs, flags.dry_run, out, log);
    if (*avg_cmd) return cmd_avg_weights(c, ckpt_paths, out_path, flags.dry_run, log);
    if (*loss_cmd) return cmd_loss(c, components, gains, out);
  } catch (const AdapterError& e) {
    log.error(e.what(), {{"kind", "adapter"}, {"diagnostics", e.diagnostics()}});
    return kExternal;
  } catch (const Error& e) {
    log.error(e.what(), {{"kind", "validation"}});
    return kValidation;
  } catch (const fs::filesystem_error& e) {
    log.error(e.what(), {{"kind", "io"}});
    return kValidation;
  } catch (const nlohmann::json::exception& e) {
    log.error(e.what(), {{"kind", "validation"}});
    return kValidation;
  }
  return kValidation;
}

}  // namespace pseudoseg::cli
