#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pseudoseg/digest.hpp"
#include "pseudoseg/error.hpp"
#include "pseudoseg/geometry.hpp"
#include "pseudoseg/transform.hpp"

namespace pseudoseg {

using Json = nlohmann::json;

struct Category {
  std::int64_t id = 0;
  std::string name;
  friend bool operator==(const Category&, const Category&) = default;
};

struct ImageRecord {
  std::int64_t id = 0;
  std::string file_name;
  int width = 0;
  int height = 0;
  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

enum class Source { labeled, pseudo };

inline std::string_view to_string(Source s) { return s == Source::pseudo ? "pseudo" : "labeled"; }

struct Annotation {
  std::int64_t id = 0;
  std::int64_t image_id = 0;
  std::int64_t category_id = 0;
  PolygonSet segmentation;
  Box bbox;
  std::int64_t area = 0;  // rasterized pixel count
  std::optional<double> score;
  Source source = Source::labeled;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Dataset {
  std::vector<ImageRecord> images;
  std::vector<Annotation> annotations;
  std::vector<Category> categories;
  Json provenance = Json::object();
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Builds an annotation that satisfies every Annotation invariant: polygons
// are checked and snapped to the 1e-6 serialization grid, then bbox and
// area are derived from them. Errors name the annotation id.
inline Annotation make_annotation(std::int64_t id, std::int64_t image_id, std::int64_t category_id,
                                  PolygonSet polygons, std::optional<double> score, Source source,
                                  const ImageRecord& image) {
  const std::string ctx = "annotation " + std::to_string(id);
  if (polygons.empty()) throw ValidationError(ctx + ": empty segmentation");
  for (auto& poly : polygons) {
    check_polygon(poly, ctx);
    for (std::size_t i = 0; i < poly.size(); ++i) {
      poly[i] = quantize(poly[i]);
      const double limit = (i % 2 == 0) ? image.width : image.height;
      if (poly[i] < 0.0 || poly[i] > limit) {
        throw ValidationError(ctx + ": coordinate " + std::to_string(poly[i]) +
                              " outside image " + std::to_string(image.id) + " bounds");
      }
    }
  }
  if (score) {
    if (!std::isfinite(*score) || *score < 0.0 || *score > 1.0) {
      throw ValidationError(ctx + ": score must lie in [0,1]");
    }
    score = quantize(*score);
  }
  Annotation a;
  a.id = id;
  a.image_id = image_id;
  a.category_id = category_id;
  a.bbox = bounding_box(polygons);
  a.bbox = {quantize(a.bbox.x), quantize(a.bbox.y), quantize(a.bbox.w), quantize(a.bbox.h)};
  a.area = rasterize(polygons, image.width, image.height).popcount();
  a.segmentation = std::move(polygons);
  a.score = score;
  a.source = source;
  return a;
}

inline Mask annotation_mask(const Annotation& a, const ImageRecord& image) {
  return rasterize(a.segmentation, image.width, image.height);
}

// Lookup helpers keyed by id.
inline std::unordered_map<std::int64_t, const ImageRecord*> index_images(const Dataset& d) {
  std::unordered_map<std::int64_t, const ImageRecord*> out;
  for (const auto& im : d.images) out.emplace(im.id, &im);
  return out;
}

namespace detail {

template <typename T>
T required(const Json& obj, const char* key, const std::string& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(ctx + ": missing \"" + key + "\"");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(ctx + ": field \"" + key + "\" has the wrong type");
  }
}

inline std::int64_t positive_id(const Json& obj, const char* key, const std::string& ctx) {
  const auto& v = obj.find(key);
  if (v == obj.end() || !v->is_number_integer()) {
    throw ValidationError(ctx + ": \"" + key + "\" must be an integer");
  }
  const auto id = v->get<std::int64_t>();
  if (id <= 0) throw ValidationError(ctx + ": \"" + key + "\" must be positive");
  return id;
}

inline PolygonSet parse_segmentation(const Json& seg, const std::string& ctx) {
  if (seg.is_object()) {
    throw ValidationError(ctx + ": RLE segmentation is not supported, use polygon lists");
  }
  if (!seg.is_array()) throw ValidationError(ctx + ": segmentation must be a list of polygons");
  PolygonSet out;
  for (const auto& poly : seg) {
    if (!poly.is_array()) throw ValidationError(ctx + ": each polygon must be a flat number list");
    Polygon p;
    p.reserve(poly.size());
    for (const auto& v : poly) {
      if (!v.is_number()) throw ValidationError(ctx + ": polygon coordinates must be numbers");
      p.push_back(v.get<double>());
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline Json parse_json_text(std::string_view text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), e.byte);
  }
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v == 0.0 ? 0.0 : v);
  return buf;
}

inline std::string quoted(const std::string& s) { return Json(s).dump(); }

inline void append_polygon(std::string& out, const Polygon& p) {
  out += '[';
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) out += ", ";
    out += fixed6(p[i]);
  }
  out += ']';
}

}  // namespace detail

inline Category parse_category(const Json& c) {
  if (!c.is_object()) throw ValidationError("category entries must be objects");
  Category cat;
  cat.id = detail::positive_id(c, "id", "category");
  cat.name = detail::required<std::string>(c, "name", "category " + std::to_string(cat.id));
  return cat;
}

inline ImageRecord parse_image_record(const Json& j) {
  if (!j.is_object()) throw ValidationError("image entries must be objects");
  ImageRecord im;
  im.id = detail::positive_id(j, "id", "image");
  const std::string ctx = "image " + std::to_string(im.id);
  im.file_name = detail::required<std::string>(j, "file_name", ctx);
  const auto w = detail::required<std::int64_t>(j, "width", ctx);
  const auto h = detail::required<std::int64_t>(j, "height", ctx);
  if (w <= 0 || h <= 0 || w > (1 << 20) || h > (1 << 20)) {
    throw ValidationError(ctx + ": width and height must be positive");
  }
  im.width = static_cast<int>(w);
  im.height = static_cast<int>(h);
  return im;
}

// Checks id uniqueness and reference resolution. Annotations are assumed
// to be individually valid already.
inline void validate_references(const Dataset& d) {
  std::set<std::int64_t> image_ids, cat_ids, ann_ids;
  for (const auto& im : d.images) {
    if (!image_ids.insert(im.id).second) {
      throw ValidationError("duplicate image id " + std::to_string(im.id));
    }
  }
  for (const auto& c : d.categories) {
    if (!cat_ids.insert(c.id).second) {
      throw ValidationError("duplicate category id " + std::to_string(c.id));
    }
  }
  for (const auto& a : d.annotations) {
    if (!ann_ids.insert(a.id).second) {
      throw ValidationError("duplicate annotation id " + std::to_string(a.id));
    }
    if (!image_ids.count(a.image_id)) {
      throw ReferentialError("annotation " + std::to_string(a.id) + ": unknown image_id " +
                             std::to_string(a.image_id));
    }
    if (!cat_ids.count(a.category_id)) {
      throw ReferentialError("annotation " + std::to_string(a.id) + ": unknown category_id " +
                             std::to_string(a.category_id));
    }
  }
}

inline void sort_by_id(Dataset& d) {
  auto by_id = [](const auto& a, const auto& b) { return a.id < b.id; };
  std::sort(d.images.begin(), d.images.end(), by_id);
  std::sort(d.annotations.begin(), d.annotations.end(), by_id);
  std::sort(d.categories.begin(), d.categories.end(), by_id);
}

// Parses a COCO-style document. Arrays come back sorted by id; bbox and area
// are always recomputed from the polygons; unknown top-level keys are kept
// under provenance["extra"].
inline Dataset parse_dataset(std::string_view text) {
  const Json doc = detail::parse_json_text(text);
  if (!doc.is_object()) throw ValidationError("dataset document must be a JSON object");
  for (const char* key : {"images", "annotations", "categories"}) {
    auto it = doc.find(key);
    if (it == doc.end() || !it->is_array()) {
      throw ValidationError(std::string("dataset document needs a \"") + key + "\" array");
    }
  }

  Dataset d;
  for (const auto& j : doc["images"]) d.images.push_back(parse_image_record(j));
  for (const auto& j : doc["categories"]) d.categories.push_back(parse_category(j));

  if (auto it = doc.find("provenance"); it != doc.end()) {
    if (!it->is_object()) throw ValidationError("\"provenance\" must be an object");
    d.provenance = *it;
  }
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto& k = it.key();
    if (k == "images" || k == "annotations" || k == "categories" || k == "provenance") continue;
    d.provenance["extra"][k] = it.value();
  }

  // Image lookup must not dangle: d.images is not resized below.
  std::unordered_map<std::int64_t, const ImageRecord*> images;
  for (const auto& im : d.images) images.emplace(im.id, &im);
  std::set<std::int64_t> cat_ids;
  for (const auto& c : d.categories) cat_ids.insert(c.id);

  for (const auto& j : doc["annotations"]) {
    if (!j.is_object()) throw ValidationError("annotation entries must be objects");
    const auto id = detail::positive_id(j, "id", "annotation");
    const std::string ctx = "annotation " + std::to_string(id);
    const auto image_id = detail::positive_id(j, "image_id", ctx);
    const auto category_id = detail::positive_id(j, "category_id", ctx);
    auto im = images.find(image_id);
    if (im == images.end()) {
      throw ReferentialError(ctx + ": unknown image_id " + std::to_string(image_id));
    }
    if (!cat_ids.count(category_id)) {
      throw ReferentialError(ctx + ": unknown category_id " + std::to_string(category_id));
    }
    auto seg_it = j.find("segmentation");
    if (seg_it == j.end()) throw ValidationError(ctx + ": missing \"segmentation\"");
    PolygonSet polys = detail::parse_segmentation(*seg_it, ctx);

    std::optional<double> score;
    if (auto s = j.find("score"); s != j.end() && !s->is_null()) {
      if (!s->is_number()) throw ValidationError(ctx + ": score must be a number");
      score = s->get<double>();
    }
    Source source = Source::labeled;
    if (auto s = j.find("source"); s != j.end()) {
      const auto tag = s->is_string() ? s->get<std::string>() : std::string{};
      if (tag == "pseudo") {
        source = Source::pseudo;
      } else if (tag != "labeled") {
        throw ValidationError(ctx + ": source must be \"labeled\" or \"pseudo\"");
      }
    }
    d.annotations.push_back(
        make_annotation(id, image_id, category_id, std::move(polys), score, source, *im->second));
  }

  validate_references(d);
  sort_by_id(d);
  return d;
}

// Canonical serialization: fixed key order, arrays ascending by id, 6-decimal
// fixed-point coordinates, one record per line, compact sorted provenance.
inline std::string write_dataset(const Dataset& input) {
  Dataset d = input;
  sort_by_id(d);
  using detail::fixed6;
  using detail::quoted;

  std::string out = "{\n  \"images\": [";
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    const auto& im = d.images[i];
    out += i ? ",\n    " : "\n    ";
    out += "{\"id\": " + std::to_string(im.id) + ", \"file_name\": " + quoted(im.file_name) +
           ", \"width\": " + std::to_string(im.width) +
           ", \"height\": " + std::to_string(im.height) + "}";
  }
  out += d.images.empty() ? "],\n" : "\n  ],\n";

  out += "  \"annotations\": [";
  for (std::size_t i = 0; i < d.annotations.size(); ++i) {
    const auto& a = d.annotations[i];
    out += i ? ",\n    " : "\n    ";
    out += "{\"id\": " + std::to_string(a.id) + ", \"image_id\": " + std::to_string(a.image_id) +
           ", \"category_id\": " + std::to_string(a.category_id) + ", \"segmentation\": [";
    for (std::size_t p = 0; p < a.segmentation.size(); ++p) {
      if (p) out += ", ";
      detail::append_polygon(out, a.segmentation[p]);
    }
    out += "], \"bbox\": [" + fixed6(a.bbox.x) + ", " + fixed6(a.bbox.y) + ", " +
           fixed6(a.bbox.w) + ", " + fixed6(a.bbox.h) + "], \"area\": " + std::to_string(a.area);
    if (a.score) out += ", \"score\": " + fixed6(*a.score);
    out += ", \"source\": \"" + std::string(to_string(a.source)) + "\"}";
  }
  out += d.annotations.empty() ? "],\n" : "\n  ],\n";

  out += "  \"categories\": [";
  for (std::size_t i = 0; i < d.categories.size(); ++i) {
    const auto& c = d.categories[i];
    out += i ? ",\n    " : "\n    ";
    out += "{\"id\": " + std::to_string(c.id) + ", \"name\": " + quoted(c.name) + "}";
  }
  out += d.categories.empty() ? "],\n" : "\n  ],\n";

  out += "  \"provenance\": " + (d.provenance.is_null() ? Json::object() : d.provenance).dump() +
         "\n}\n";
  return out;
}

// Digest of images, categories and annotations only. Provenance carries
// timestamps, so hashing it would make downstream outputs time dependent.
inline std::string content_sha256(const Dataset& input) {
  Dataset d = input;
  d.provenance = nlohmann::json::object();
  return sha256_hex(write_dataset(d));
}

// Image manifest handed to inference adapters: [{id, file_name, width, height}].
inline std::string write_manifest(std::span<const ImageRecord> images) {
  Json arr = Json::array();
  for (const auto& im : images) {
    arr.push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width},
                   {"height", im.height}});
  }
  return arr.dump(2) + "\n";
}

inline std::vector<ImageRecord> parse_manifest(std::string_view text) {
  const Json doc = detail::parse_json_text(text);
  if (!doc.is_array()) throw ValidationError("manifest must be a JSON list");
  std::vector<ImageRecord> out;
  std::set<std::int64_t> seen;
  for (const auto& j : doc) {
    out.push_back(parse_image_record(j));
    if (!seen.insert(out.back().id).second) {
      throw ValidationError("manifest: duplicate image id " + std::to_string(out.back().id));
    }
  }
  return out;
}

inline AxisAffine compose(std::span<const GeometricTransform> chain, const ImageRecord& image) {
  AxisAffine m;
  for (const auto& t : chain) m = m.then(AxisAffine::from(t, image.width, image.height));
  return m;
}

// Maps the polygons, clips them to the image rectangle and rebuilds bbox and
// area. Returns nullopt when nothing with at least one rasterized pixel is
// left.
inline std::optional<Annotation> transform_annotation(const Annotation& a, const AxisAffine& m,
                                                      const ImageRecord& image) {
  if (a.image_id != image.id) throw ContractError("transform_annotation: annotation not on image");
  if (m.is_identity()) return a;
  PolygonSet kept;
  for (const auto& poly : a.segmentation) {
    Polygon mapped(poly.size());
    for (std::size_t i = 0; i + 1 < poly.size(); i += 2) {
      mapped[i] = m.sx * poly[i] + m.tx;
      mapped[i + 1] = m.sy * poly[i + 1] + m.ty;
    }
    Polygon clipped = clip_to_rect(mapped, image.width, image.height);
    if (vertex_count(clipped) >= 3) kept.push_back(std::move(clipped));
  }
  if (kept.empty()) return std::nullopt;
  Annotation out =
      make_annotation(a.id, a.image_id, a.category_id, std::move(kept), a.score, a.source, image);
  if (out.area < 1) return std::nullopt;
  return out;
}

inline std::optional<Annotation> transform_annotation(const Annotation& a,
                                                      const GeometricTransform& t,
                                                      const ImageRecord& image) {
  return transform_annotation(a, AxisAffine::from(t, image.width, image.height), image);
}

}  // namespace pseudoseg
