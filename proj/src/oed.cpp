#include "xdetect/oed.hpp"

#include <algorithm>
#include <cstring>
#include <fmt/core.h>
#include <fstream>
#include <map>
#include <set>
#include <sodium.h>

#include "xdetect/imaging.hpp"
#include "xdetect/log.hpp"
#include "xdetect/parallel.hpp"

namespace xdetect {

namespace fs = std::filesystem;

PrototypeLibrary::PrototypeLibrary(ClassRegistry classes, int n_per_class, sift::SiftParams sift,
                                   ExtractorSpec extractor, std::vector<PrototypeEntry> entries)
    : classes_(std::move(classes)),
      n_per_class_(n_per_class),
      sift_(sift),
      extractor_(std::move(extractor)),
      entries_(std::move(entries)) {
  if (n_per_class_ < 1) throw ValidationError("n_per_class must be at least 1");
  std::vector<int> counts(classes_.size(), 0);
  std::set<std::string> ids;
  for (const auto& e : entries_) {
    if (!classes_.contains(e.class_id)) {
      throw ValidationError(fmt::format("prototype {} has unknown class {}", e.prototype_id, e.class_id));
    }
    if (e.descriptors.empty()) throw ValidationError(fmt::format("prototype {} has no descriptors", e.prototype_id));
    if (!ids.insert(e.prototype_id).second) throw ValidationError(fmt::format("duplicate prototype id {}", e.prototype_id));
    ++counts[static_cast<std::size_t>(e.class_id)];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] != n_per_class_) {
      throw ValidationError(fmt::format("class '{}' has {} prototypes, expected {}", classes_.name(static_cast<ClassId>(c)),
                                        counts[c], n_per_class_));
    }
  }
  std::sort(entries_.begin(), entries_.end(),
            [](const PrototypeEntry& a, const PrototypeEntry& b) { return a.prototype_id < b.prototype_id; });
}

const PrototypeEntry* PrototypeLibrary::find(const std::string& prototype_id) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), prototype_id,
                             [](const PrototypeEntry& e, const std::string& id) { return e.prototype_id < id; });
  return it != entries_.end() && it->prototype_id == prototype_id ? &*it : nullptr;
}

PrototypeLibrary build_prototype_library(const ClassRegistry& classes, const std::vector<std::vector<NamedImage>>& images,
                                         int n_per_class, const ExtractorSpec& extractor,
                                         const sift::SiftParams& sift, int jobs) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (images.size() != classes.size()) {
    throw ValidationError(fmt::format("got image lists for {} classes, registry has {}", images.size(), classes.size()));
  }
  for (std::size_t c = 0; c < images.size(); ++c) {
    if (images[c].size() < static_cast<std::size_t>(n_per_class)) {
      throw ValidationError(fmt::format("class '{}' supplies {} images, needs {}", classes.name(static_cast<ClassId>(c)),
                                        images[c].size(), n_per_class));
    }
  }
  const std::size_t n = static_cast<std::size_t>(n_per_class);
  std::vector<PrototypeEntry> entries(classes.size() * n);
  parallel_for(entries.size(), jobs, [&](std::size_t idx) {
    const std::size_t c = idx / n, i = idx % n;
    const NamedImage& src = images[c][i];
    ModelOutput whole;
    whole.bbox = BBox{0, 0, static_cast<double>(src.image.width()), static_cast<double>(src.image.height())};
    whole.class_id = static_cast<ClassId>(c);
    whole.confidence = 1.0;
    PrototypeEntry e;
    e.prototype_id = fmt::format("{:03d}-{:03d}", c, i);
    e.class_id = static_cast<ClassId>(c);
    try {
      e.image = extract_object(src.image, whole, extractor);
    } catch (const Error& err) {
      throw ValidationError(fmt::format("prototype image '{}' (class '{}'): {}", src.name,
                                        classes.name(static_cast<ClassId>(c)), err.what()));
    }
    auto f = sift::extract_features(e.image, sift);
    if (f.descriptors.empty()) {
      throw ValidationError(fmt::format("prototype image '{}' (class '{}') yields no SIFT descriptors", src.name,
                                        classes.name(static_cast<ClassId>(c))));
    }
    e.keypoints = std::move(f.keypoints);
    e.descriptors = std::move(f.descriptors);
    entries[idx] = std::move(e);
  });
  return PrototypeLibrary(classes, n_per_class, sift, extractor, std::move(entries));
}

std::string encode_descriptors(const std::vector<sift::Descriptor>& descriptors) {
  std::vector<unsigned char> bytes(descriptors.size() * 128 * sizeof(float));
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    std::memcpy(bytes.data() + i * 128 * sizeof(float), descriptors[i].data(), 128 * sizeof(float));
  }
  const int variant = sodium_base64_VARIANT_ORIGINAL;
  std::string out(sodium_base64_encoded_len(bytes.size(), variant), '\0');
  sodium_bin2base64(out.data(), out.size(), bytes.data(), bytes.size(), variant);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<sift::Descriptor> decode_descriptors(const std::string& text) {
  std::vector<unsigned char> bytes(text.size());
  std::size_t len = 0;
  if (sodium_base642bin(bytes.data(), bytes.size(), text.data(), text.size(), nullptr, &len, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw ValidationError("malformed base64 descriptor blob");
  }
  constexpr std::size_t kBytes = 128 * sizeof(float);
  if (len % kBytes != 0) throw ValidationError("descriptor blob length is not a multiple of 128 floats");
  std::vector<sift::Descriptor> out(len / kBytes);
  for (std::size_t i = 0; i < out.size(); ++i) std::memcpy(out[i].data(), bytes.data() + i * kBytes, kBytes);
  return out;
}

namespace {

nlohmann::json keypoint_json(const sift::Keypoint& kp) {
  return {{"x", kp.x},           {"y", kp.y},         {"sigma", kp.sigma}, {"orientation", kp.orientation},
          {"response", kp.response}, {"octave", kp.octave}, {"level", kp.level}, {"level_offset", kp.level_offset}};
}

sift::Keypoint keypoint_from_json(const nlohmann::json& j) {
  sift::Keypoint kp;
  kp.x = j.at("x").get<double>();
  kp.y = j.at("y").get<double>();
  kp.sigma = j.at("sigma").get<double>();
  kp.orientation = j.at("orientation").get<double>();
  kp.response = j.value("response", 0.0);
  kp.octave = j.value("octave", 0);
  kp.level = j.value("level", 0);
  kp.level_offset = j.value("level_offset", 0.0);
  return kp;
}

}  // namespace

void save_library(const PrototypeLibrary& lib, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json index;
  index["format"] = 1;
  index["classes"] = lib.classes().names();
  index["n_per_class"] = lib.n_per_class();
  index["sift"] = lib.sift_params();
  index["extractor"] = lib.extractor();
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : lib.entries()) {
    const std::string& cls = lib.classes().name(e.class_id);
    const fs::path rel = fs::path(cls) / (e.prototype_id + ".png");
    fs::create_directories(dir / cls);
    write_png(e.image, dir / rel);
    nlohmann::json kps = nlohmann::json::array();
    for (const auto& kp : e.keypoints) kps.push_back(keypoint_json(kp));
    entries.push_back({{"prototype_id", e.prototype_id},
                       {"class", cls},
                       {"image", rel.generic_string()},
                       {"keypoints", kps},
                       {"descriptors", encode_descriptors(e.descriptors)}});
  }
  index["entries"] = entries;
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError(fmt::format("cannot write '{}'", (dir / "index.json").string()));
  out << index.dump(1) << '\n';
  if (!out) throw IoError(fmt::format("failed writing '{}'", (dir / "index.json").string()));
}

PrototypeLibrary load_library(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  std::ifstream in(index_path);
  if (!in) throw IoError(fmt::format("cannot open prototype index '{}'", index_path.string()));
  nlohmann::json index;
  try {
    in >> index;
    ClassRegistry classes(index.at("classes").get<std::vector<std::string>>());
    std::vector<PrototypeEntry> entries;
    for (const auto& j : index.at("entries")) {
      PrototypeEntry e;
      e.prototype_id = j.at("prototype_id").get<std::string>();
      const auto cls = j.at("class").get<std::string>();
      const auto id = classes.find(cls);
      if (!id) throw ValidationError(fmt::format("prototype {} names unknown class '{}'", e.prototype_id, cls));
      e.class_id = *id;
      e.image = read_png(dir / j.at("image").get<std::string>());
      for (const auto& kp : j.at("keypoints")) e.keypoints.push_back(keypoint_from_json(kp));
      e.descriptors = decode_descriptors(j.at("descriptors").get<std::string>());
      entries.push_back(std::move(e));
    }
    return PrototypeLibrary(std::move(classes), index.at("n_per_class").get<int>(),
                            index.at("sift").get<sift::SiftParams>(), index.at("extractor").get<ExtractorSpec>(),
                            std::move(entries));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(fmt::format("prototype index '{}': {}", index_path.string(), e.what()));
  }
}

std::vector<PrototypeScore> score_prototypes(const std::vector<sift::Descriptor>& query, const PrototypeLibrary& lib,
                                             int jobs) {
  if (lib.size() == 0) throw ValidationError("prototype library is empty");
  const auto& entries = lib.entries();
  std::vector<PrototypeScore> scores(entries.size());
  parallel_for(entries.size(), jobs, [&](std::size_t i) {
    const auto& e = entries[i];
    scores[i] = PrototypeScore{e.prototype_id, e.class_id,
                               sift::match_descriptors(query, e.descriptors, lib.sift_params().match_ratio).count()};
  });
  std::sort(scores.begin(), scores.end(), [](const PrototypeScore& a, const PrototypeScore& b) {
    if (a.match_count != b.match_count) return a.match_count > b.match_count;
    return a.prototype_id < b.prototype_id;
  });
  return scores;
}

std::vector<PrototypeScore> score_prototypes(const Image& query, const PrototypeLibrary& lib, int jobs) {
  return score_prototypes(sift::extract_features(query, lib.sift_params()).descriptors, lib, jobs);
}

KnnResult prototype_knn_classify(std::vector<PrototypeScore> scores, int k, std::size_t n_classes) {
  if (k < 1) throw ConfigError("k must be at least 1");
  if (scores.empty()) throw ValidationError("no prototype scores to vote over");
  if (static_cast<std::size_t>(k) > scores.size()) {
    logger().warn("k={} exceeds the {} available prototypes; clamping", k, scores.size());
    k = static_cast<int>(scores.size());
  }
  std::sort(scores.begin(), scores.end(), [](const PrototypeScore& a, const PrototypeScore& b) {
    if (a.match_count != b.match_count) return a.match_count > b.match_count;
    return a.prototype_id < b.prototype_id;
  });
  scores.resize(static_cast<std::size_t>(k));
  // a prototype sharing no keypoint is no neighbour; it only votes when nothing matched at all
  const auto first_zero = std::find_if(scores.begin(), scores.end(), [](const PrototypeScore& s) { return s.match_count == 0; });
  if (first_zero != scores.begin()) scores.erase(first_zero, scores.end());
  const double voters = static_cast<double>(scores.size());
  std::vector<double> votes(n_classes, 0.0);
  std::vector<std::size_t> match_sum(n_classes, 0);
  for (const auto& s : scores) {
    if (s.class_id < 0 || static_cast<std::size_t>(s.class_id) >= n_classes) {
      throw ValidationError(fmt::format("score for class {} outside a {}-class registry", s.class_id, n_classes));
    }
    votes[static_cast<std::size_t>(s.class_id)] += 1.0;
    match_sum[static_cast<std::size_t>(s.class_id)] += s.match_count;
  }
  std::size_t best = 0;
  for (std::size_t c = 1; c < n_classes; ++c) {
    if (votes[c] > votes[best] || (votes[c] == votes[best] && match_sum[c] > match_sum[best])) best = c;
  }
  for (double& v : votes) v /= voters;
  return KnnResult{static_cast<ClassId>(best), ClassDistribution(std::move(votes)), std::move(scores)};
}

OedResult oed_classify(const Image& scene, const ModelOutput& model_output, const PrototypeLibrary& lib,
                       const OedConfig& cfg) {
  OedResult result;
  result.extraction = extract_object_detailed(scene, model_output.bbox, cfg.extractor);
  result.query = sift::extract_features(result.extraction.image, lib.sift_params());
  result.scores = score_prototypes(result.query.descriptors, lib, cfg.jobs);
  if (result.query.descriptors.empty()) {
    result.note = "extracted object has no SIFT descriptors";
    logger().info("OED inconclusive: {}", result.note);
    return result;
  }
  if (result.scores.front().match_count == 0) {
    result.note = "no prototype shares a matching keypoint";
    logger().info("OED inconclusive: {}", result.note);
    return result;
  }
  auto knn = prototype_knn_classify(result.scores, cfg.k, lib.classes().size());
  result.class_id = knn.class_id;
  result.votes = std::move(knn.votes);
  return result;
}

Image render_match_overlay(const Image& query, const sift::Features& query_features, const PrototypeEntry& proto,
                           double match_ratio) {
  const Image a = query.to_rgb();
  const Image b = proto.image.to_rgb();
  const int gap = 4;
  const int w = a.width() + gap + b.width();
  const int h = std::max(a.height(), b.height());
  std::vector<double> px(static_cast<std::size_t>(w) * h * 3, 0.0);
  auto blit = [&](const Image& img, int ox) {
    for (int y = 0; y < img.height(); ++y) {
      for (int x = 0; x < img.width(); ++x) {
        for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * w + ox + x) * 3 + c] = img.at(y, x, c);
      }
    }
  };
  blit(a, 0);
  blit(b, a.width() + gap);
  const auto matches = sift::match_descriptors(query_features.descriptors, proto.descriptors, match_ratio);
  const double color[3] = {0.1, 1.0, 0.2};
  for (const auto& m : matches.pairs) {
    const auto& ka = query_features.keypoints[m.index_a];
    const auto& kb = proto.keypoints[m.index_b];
    draw_line(px, w, h, static_cast<int>(std::lround(ka.x)), static_cast<int>(std::lround(ka.y)),
              a.width() + gap + static_cast<int>(std::lround(kb.x)), static_cast<int>(std::lround(kb.y)), color);
  }
  return Image::clipped(h, w, 3, std::move(px));
}

}  // namespace xdetect
