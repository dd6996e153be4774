#pragma once

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "pseudoseg/dataset.hpp"
#include "pseudoseg/digest.hpp"
#include "pseudoseg/error.hpp"

extern char** environ;

namespace pseudoseg {

// One model output for one instance on one image.
struct PredictionRecord {
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  PolygonSet segmentation;
  double score = 0.0;
  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

struct ThresholdPolicy {
  double tau = 0.5;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ContractError("threshold tau must lie in [0,1]");
  }
};

struct AdapterSpec {
  enum class Mode { file, exec };
  Mode mode = Mode::file;
  std::string path;     // file mode: predictions file
  std::string command;  // exec mode: invoked as `<command> <manifest> <output>`
  double timeout_seconds = 600.0;

  void validate() const {
    if (!(timeout_seconds > 0.0)) throw ContractError("adapter timeout must be positive");
    if (mode == Mode::file && path.empty()) throw ContractError("file adapter needs a path");
    if (mode == Mode::exec && command.empty()) throw ContractError("exec adapter needs a command");
  }
};

// ---------------------------------------------------------------------------
// Predictions file (JSON Lines)

// Parses one object per non-blank line. Checks structure and score range;
// reference checks need the image set and live in validate_predictions.
inline std::vector<PredictionRecord> parse_predictions(std::string_view text) {
  std::vector<PredictionRecord> out;
  std::size_t line_start = 0;
  std::size_t line_no = 0;
  while (line_start < text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string_view::npos) line_end = text.size();
    const std::string_view line = text.substr(line_start, line_end - line_start);
    ++line_no;
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
      Json j;
      try {
        j = Json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("predictions line " + std::to_string(line_no) + ": " + e.what(),
                         line_start + (e.byte > 0 ? e.byte - 1 : 0));
      }
      const std::string ctx = "prediction on line " + std::to_string(line_no);
      if (!j.is_object()) throw ValidationError(ctx + ": expected an object");
      PredictionRecord p;
      p.image_id = detail::positive_id(j, "image_id", ctx);
      p.category_id = detail::positive_id(j, "category_id", ctx);
      auto seg = j.find("segmentation");
      if (seg == j.end()) throw ValidationError(ctx + ": missing \"segmentation\"");
      p.segmentation = detail::parse_segmentation(*seg, ctx);
      if (p.segmentation.empty()) throw ValidationError(ctx + ": empty segmentation");
      for (const auto& poly : p.segmentation) check_polygon(poly, ctx);
      auto s = j.find("score");
      if (s == j.end() || !s->is_number()) throw ValidationError(ctx + ": score must be a number");
      p.score = s->get<double>();
      if (!std::isfinite(p.score) || p.score < 0.0 || p.score > 1.0) {
        throw ValidationError(ctx + ": score " + std::to_string(p.score) + " outside [0,1]");
      }
      out.push_back(std::move(p));
    }
    line_start = line_end + 1;
  }
  return out;
}

inline std::string write_predictions(std::span<const PredictionRecord> preds) {
  std::string out;
  for (const auto& p : preds) {
    Json seg = Json::array();
    for (const auto& poly : p.segmentation) seg.push_back(poly);
    Json j = {{"image_id", p.image_id},
              {"category_id", p.category_id},
              {"segmentation", seg},
              {"score", p.score}};
    out += j.dump() + "\n";
  }
  return out;
}

// Every prediction must sit on a known image with in-bounds coordinates.
inline void validate_predictions(std::span<const PredictionRecord> preds,
                                 std::span<const ImageRecord> images) {
  std::unordered_map<std::int64_t, const ImageRecord*> by_id;
  for (const auto& im : images) by_id.emplace(im.id, &im);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    const std::string ctx = "prediction " + std::to_string(i + 1);
    auto it = by_id.find(p.image_id);
    if (it == by_id.end()) {
      throw ReferentialError(ctx + ": unknown image_id " + std::to_string(p.image_id));
    }
    if (!std::isfinite(p.score) || p.score < 0.0 || p.score > 1.0) {
      throw ValidationError(ctx + ": score outside [0,1]");
    }
    for (const auto& poly : p.segmentation) {
      check_polygon(poly, ctx);
      for (std::size_t k = 0; k < poly.size(); ++k) {
        const double limit = (k % 2 == 0) ? it->second->width : it->second->height;
        if (quantize(poly[k]) < 0.0 || quantize(poly[k]) > limit) {
          throw ValidationError(ctx + ": coordinate outside image bounds");
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Inference adapter

namespace detail {

inline std::string tail_of_file(const std::filesystem::path& p, std::size_t max_bytes = 4096) {
  std::error_code ec;
  if (!std::filesystem::exists(p, ec)) return {};
  std::string all = read_file(p.string());
  if (all.size() > max_bytes) all = all.substr(all.size() - max_bytes);
  return all;
}

// Runs `/bin/sh -c '<command> "$1" "$2"' sh arg1 arg2` in its own process
// group with stderr captured to a file. Returns the wait status.
inline int run_with_timeout(const std::string& command, const std::string& arg1,
                            const std::string& arg2, const std::filesystem::path& stderr_path,
                            double timeout_seconds) {
  const std::string script = command + " \"$1\" \"$2\"";
  std::vector<std::string> argv_s = {"/bin/sh", "-c", script, "sh", arg1, arg2};
  std::vector<char*> argv;
  for (auto& s : argv_s) argv.push_back(s.data());
  argv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  const std::string err_path = stderr_path.string();
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, err_path.c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_addopen(&actions, STDIN_FILENO, "/dev/null", O_RDONLY, 0);
  posix_spawnattr_t attr;
  posix_spawnattr_init(&attr);
  posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
  posix_spawnattr_setpgroup(&attr, 0);

  pid_t pid = 0;
  const int rc = posix_spawn(&pid, "/bin/sh", &actions, &attr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  posix_spawnattr_destroy(&attr);
  if (rc != 0) throw AdapterError("adapter: could not spawn /bin/sh (errno " + std::to_string(rc) + ")");

  const auto deadline = std::chrono::steady_clock::now() +
                        std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                            std::chrono::duration<double>(timeout_seconds));
  int status = 0;
  for (;;) {
    const pid_t done = waitpid(pid, &status, WNOHANG);
    if (done == pid) return status;
    if (done < 0) throw AdapterError("adapter: waitpid failed");
    if (std::chrono::steady_clock::now() >= deadline) {
      kill(-pid, SIGKILL);
      waitpid(pid, &status, 0);
      throw AdapterError("adapter: timed out after " + std::to_string(timeout_seconds) + " s",
                         tail_of_file(stderr_path));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

}  // namespace detail

// Obtains predictions for `images` from the external model. In exec mode
// the manifest, the predictions file and the adapter's stderr log are
// written into `work_dir`.
inline std::vector<PredictionRecord> run_inference_adapter(const AdapterSpec& spec,
                                                           std::span<const ImageRecord> images,
                                                           const std::filesystem::path& work_dir) {
  spec.validate();
  std::string text;
  if (spec.mode == AdapterSpec::Mode::file) {
    try {
      text = read_file(spec.path);
    } catch (const IoError& e) {
      throw AdapterError(std::string("adapter: ") + e.what());
    }
  } else {
    std::filesystem::create_directories(work_dir);
    const auto manifest = work_dir / "manifest.json";
    const auto output = work_dir / "predictions.jsonl";
    const auto err_log = work_dir / "adapter_stderr.log";
    write_file(manifest.string(), write_manifest(images));
    std::filesystem::remove(output);
    const int status =
        detail::run_with_timeout(spec.command, manifest.string(), output.string(), err_log,
                                 spec.timeout_seconds);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      const std::string how = WIFEXITED(status)
                                  ? "exited with status " + std::to_string(WEXITSTATUS(status))
                                  : "terminated by signal " + std::to_string(WTERMSIG(status));
      throw AdapterError("adapter: command " + how, detail::tail_of_file(err_log));
    }
    if (!std::filesystem::exists(output)) {
      throw AdapterError("adapter: command succeeded but wrote no predictions file",
                         detail::tail_of_file(err_log));
    }
    text = read_file(output.string());
  }
  auto preds = parse_predictions(text);
  validate_predictions(preds, images);
  return preds;
}

// ---------------------------------------------------------------------------
// Curation

// Keeps records with score >= tau, in their original order.
inline std::vector<PredictionRecord> filter_predictions(std::span<const PredictionRecord> preds,
                                                        const ThresholdPolicy& policy) {
  policy.validate();
  std::vector<PredictionRecord> out;
  std::copy_if(preds.begin(), preds.end(), std::back_inserter(out),
               [&](const PredictionRecord& p) { return p.score >= policy.tau; });
  return out;
}

// Builds the pseudo-labeled dataset. Annotation ids run 1..n in input order;
// images without predictions stay in the dataset as background.
inline Dataset predictions_to_dataset(std::span<const PredictionRecord> preds,
                                      std::span<const ImageRecord> images,
                                      std::span<const Category> categories) {
  Dataset d;
  d.images.assign(images.begin(), images.end());
  d.categories.assign(categories.begin(), categories.end());
  sort_by_id(d);
  std::set<std::int64_t> cat_ids;
  for (const auto& c : d.categories) cat_ids.insert(c.id);
  std::unordered_map<std::int64_t, const ImageRecord*> by_id;
  for (const auto& im : d.images) by_id.emplace(im.id, &im);

  std::int64_t next_id = 1;
  for (const auto& p : preds) {
    const std::int64_t id = next_id++;
    auto im = by_id.find(p.image_id);
    if (im == by_id.end()) {
      throw ReferentialError("prediction " + std::to_string(id) + ": unknown image_id " +
                             std::to_string(p.image_id));
    }
    if (!cat_ids.count(p.category_id)) {
      throw ReferentialError("prediction " + std::to_string(id) + ": unknown category_id " +
                             std::to_string(p.category_id));
    }
    d.annotations.push_back(make_annotation(id, p.image_id, p.category_id, p.segmentation, p.score,
                                            Source::pseudo, *im->second));
  }
  validate_references(d);
  return d;
}

// Disjoint union of a labeled and a pseudo-labeled dataset. Images and
// annotations are renumbered from 1, labeled block first, each block in
// ascending original id. Nothing is deduplicated.
inline Dataset merge_datasets(const Dataset& labeled, const Dataset& pseudo) {
  auto sorted_cats = [](std::vector<Category> c) {
    std::sort(c.begin(), c.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return c;
  };
  const auto cats = sorted_cats(labeled.categories);
  if (cats != sorted_cats(pseudo.categories)) {
    throw ContractError("merge: category tables differ between the labeled and pseudo datasets");
  }

  Dataset out;
  out.categories = cats;
  std::int64_t next_image = 1;
  std::int64_t next_ann = 1;
  for (const Dataset* src : {&labeled, &pseudo}) {
    Dataset part = *src;
    sort_by_id(part);
    std::unordered_map<std::int64_t, std::int64_t> remap;
    for (auto im : part.images) {
      remap[im.id] = next_image;
      im.id = next_image++;
      out.images.push_back(std::move(im));
    }
    for (auto a : part.annotations) {
      auto it = remap.find(a.image_id);
      if (it == remap.end()) {
        throw ReferentialError("merge: annotation " + std::to_string(a.id) +
                               " refers to unknown image " + std::to_string(a.image_id));
      }
      a.image_id = it->second;
      a.id = next_ann++;
      out.annotations.push_back(std::move(a));
    }
  }
  out.provenance = {{"merge",
                     {{"labeled_sha256", content_sha256(labeled)},
                      {"pseudo_sha256", content_sha256(pseudo)},
                      {"labeled_provenance", labeled.provenance},
                      {"pseudo_provenance", pseudo.provenance}}}};
  return out;
}

}  // namespace pseudoseg
