#pragma once
// Progressive prompt-based instance segmentation. Each subject's rasterized
// mesh provides a mask prompt; its projected keypoints that are visible
// inside that mask become positive point prompts, and other subjects'
// keypoints falling outside it become negative ones. A pluggable segmenter
// turns (image, prompts) into a binary mask; masks live in a per-frame,
// per-person store that is refreshed every few optimization epochs. A
// synthetic oracle segmenter (ground truth plus morphological noise, snapped
// to honor the prompts) stands in for a real promptable model, and a
// process-level adapter exchanges PNG/JSON files so one can be dropped in.

#include <compare>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/common.hpp"
#include "strata/image.hpp"
#include "strata/raster.hpp"
#include "strata/rng.hpp"

namespace strata {

struct PixelPoint {
  int x = 0, y = 0;
  auto operator<=>(const PixelPoint&) const = default;
};

struct PromptSet {
  Mask m_mesh;                        // full rasterized silhouette of the subject
  std::vector<PixelPoint> positive;   // sorted, deduplicated, inside m_mesh
  std::vector<PixelPoint> negative;   // sorted, deduplicated, outside m_mesh
  bool low_confidence = false;        // no visible positive point (mask-only prompt)
  int frame = -1, person = -1;        // metadata for oracles and file adapters
};

//! Keypoints of one subject projected into the image.
struct ProjectedKeypoints {
  std::vector<PixelPoint> px;  // rounded pixel coordinates
  VecX depth;                  // camera-space depth of the 3D keypoint
  std::vector<bool> valid;     // in front of the camera and inside the image
};

inline ProjectedKeypoints project_keypoints(const Camera& cam, const ParamBody& body,
                                            const PoseParams& pose) {
  ProjectedKeypoints out;
  std::vector<Vec3> joints = joint_positions(body, pose);
  const int K = static_cast<int>(body.keypoints.size());
  out.px.resize(static_cast<size_t>(K));
  out.depth = VecX::Zero(K);
  out.valid.assign(static_cast<size_t>(K), false);
  for (int k = 0; k < K; ++k) {
    const Vec3& x = joints[static_cast<size_t>(body.keypoints[static_cast<size_t>(k)])];
    double d = camera_depth(cam, x);
    out.depth[k] = d;
    if (!(d > 0.0)) continue;
    Vec2 uv = project_point(cam, x);
    int px = static_cast<int>(std::lround(uv.x()));
    int py = static_cast<int>(std::lround(uv.y()));
    if (px < 0 || py < 0 || px >= cam.width || py >= cam.height) continue;
    out.px[static_cast<size_t>(k)] = {px, py};
    out.valid[static_cast<size_t>(k)] = true;
  }
  return out;
}

namespace detail {

inline void sort_unique(std::vector<PixelPoint>& pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
}

}  // namespace detail

//! Builds the prompt set for person `p` from the current rasterization and
//! every subject's projected keypoints. Positive points are p's keypoints
//! that land inside p's silhouette and are not hidden behind another
//! subject's surface; negative points are other subjects' keypoints landing
//! outside p's silhouette. An entirely occluded subject yields a mask-only
//! prompt flagged low-confidence.
inline PromptSet build_prompt_set(int p, const RasterOutput& raster,
                                  const std::vector<ProjectedKeypoints>& keypoints) {
  const int P = static_cast<int>(keypoints.size());
  if (p < 0 || p >= P) throw ConfigError("build_prompt_set: person index out of range");
  if (static_cast<int>(raster.covered.size()) != P)
    throw DataError("build_prompt_set: raster person count does not match keypoints");
  PromptSet out;
  out.person = p;
  out.m_mesh = raster.covered[static_cast<size_t>(p)];

  const ProjectedKeypoints& own = keypoints[static_cast<size_t>(p)];
  for (size_t k = 0; k < own.px.size(); ++k) {
    if (!own.valid[k]) continue;
    const PixelPoint& pt = own.px[k];
    if (!out.m_mesh.at(pt.x, pt.y)) continue;
    bool occluded = false;
    for (int q = 0; q < P && !occluded; ++q)
      if (q != p && raster.depth[static_cast<size_t>(q)](pt.y, pt.x) < own.depth[static_cast<Eigen::Index>(k)])
        occluded = true;
    if (!occluded) out.positive.push_back(pt);
  }
  for (int q = 0; q < P; ++q) {
    if (q == p) continue;
    const ProjectedKeypoints& other = keypoints[static_cast<size_t>(q)];
    for (size_t k = 0; k < other.px.size(); ++k) {
      if (!other.valid[k]) continue;
      const PixelPoint& pt = other.px[k];
      if (!out.m_mesh.at(pt.x, pt.y)) out.negative.push_back(pt);
    }
  }
  detail::sort_unique(out.positive);
  detail::sort_unique(out.negative);
  out.low_confidence = out.positive.empty();
  return out;
}

//! True when the mask honors every point prompt.
inline bool prompts_satisfied(const Mask& mask, const PromptSet& prompts) {
  for (const PixelPoint& pt : prompts.positive)
    if (!mask.at(pt.x, pt.y)) return false;
  for (const PixelPoint& pt : prompts.negative)
    if (mask.at(pt.x, pt.y)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Segmenter interface and mask store
// ---------------------------------------------------------------------------

class SegmenterInterface {
 public:
  virtual ~SegmenterInterface() = default;
  //! Returns a binary mask at the image's resolution. `image` may be empty
  //! (0x0) for segmenters that do not need pixels.
  virtual Mask segment(const Image& image, const PromptSet& prompts) = 0;
};

struct MaskEntry {
  Mask m_sam;             // current instance mask
  Mask m_mesh;            // silhouette prompt used at the last refresh
  int refresh_epoch = -1; // epoch of the last successful refresh
  bool low_confidence = false;
  bool stale = false;     // segmenter failed; m_sam kept from before
};

struct MaskStore {
  int frames = 0, persons = 0;
  std::vector<MaskEntry> entries;

  MaskStore() = default;
  MaskStore(int frames_, int persons_)
      : frames(frames_), persons(persons_),
        entries(static_cast<size_t>(frames_) * static_cast<size_t>(persons_)) {
    if (frames_ <= 0 || persons_ <= 0) throw ConfigError("MaskStore: need positive frame and person counts");
  }
  MaskEntry& at(int f, int p) { return entries[static_cast<size_t>(f) * persons + p]; }
  const MaskEntry& at(int f, int p) const { return entries[static_cast<size_t>(f) * persons + p]; }
};

//! Per-frame inputs for a mask refresh.
struct SegmentationFrame {
  const Image* image = nullptr;               // may be null (oracle segmenters)
  const RasterOutput* raster = nullptr;
  std::vector<ProjectedKeypoints> keypoints;  // one per person
};

//! Re-runs the segmenter over all frames and persons with prompts built from
//! the current rasterizations. A segmenter failure keeps the previous mask
//! for that entry and marks it stale. Returns the number of stale entries.
inline int refresh_masks(MaskStore& store, SegmenterInterface& segmenter,
                         const std::vector<SegmentationFrame>& frames, int epoch) {
  if (static_cast<int>(frames.size()) != store.frames)
    throw DataError("refresh_masks: frame count does not match the store");
  static const Image kNoImage(0, 0, 0);
  int stale = 0;
  for (int f = 0; f < store.frames; ++f) {
    const SegmentationFrame& fr = frames[static_cast<size_t>(f)];
    if (!fr.raster) throw DataError("refresh_masks: frame missing rasterization");
    if (static_cast<int>(fr.keypoints.size()) != store.persons)
      throw DataError("refresh_masks: keypoint person count does not match the store");
    for (int p = 0; p < store.persons; ++p) {
      PromptSet prompts = build_prompt_set(p, *fr.raster, fr.keypoints);
      prompts.frame = f;
      MaskEntry& entry = store.at(f, p);
      entry.m_mesh = prompts.m_mesh;
      entry.low_confidence = prompts.low_confidence;
      try {
        Mask m = segmenter.segment(fr.image ? *fr.image : kNoImage, prompts);
        if (m.w != fr.raster->width || m.h != fr.raster->height)
          throw DataError("refresh_masks: segmenter returned a mask of the wrong size");
        for (uint8_t& v : m.v) v = v ? 1 : 0;
        entry.m_sam = std::move(m);
        entry.refresh_epoch = epoch;
        entry.stale = false;
      } catch (const std::exception&) {
        entry.stale = true;  // keep the previous mask and refresh epoch
        ++stale;
      }
    }
  }
  return stale;
}

// ---------------------------------------------------------------------------
// Oracle segmenter (ground truth + noise, snapped to the prompts)
// ---------------------------------------------------------------------------

//! Stand-in for a promptable segmentation model on synthetic scenes: returns
//! the ground-truth mask morphologically perturbed (random dilation/erosion
//! up to `noise_radius`, boundary flips with probability `flip_prob`), then
//! repaired so that every positive prompt is covered and every negative one
//! excluded (violations are fixed with small disks, then exact pixels).
class OracleSegmenter final : public SegmenterInterface {
 public:
  OracleSegmenter(std::vector<std::vector<Mask>> gt, int noise_radius, double flip_prob,
                  uint64_t seed)
      : gt_(std::move(gt)), radius_(noise_radius), flip_(flip_prob), seed_(seed) {
    if (noise_radius < 0 || flip_prob < 0.0 || flip_prob > 1.0)
      throw ConfigError("OracleSegmenter: bad noise model");
  }

  Mask segment(const Image&, const PromptSet& prompts) override {
    if (prompts.frame < 0 || prompts.frame >= static_cast<int>(gt_.size()))
      throw DataError("OracleSegmenter: prompt frame out of range");
    const auto& row = gt_[static_cast<size_t>(prompts.frame)];
    if (prompts.person < 0 || prompts.person >= static_cast<int>(row.size()))
      throw DataError("OracleSegmenter: prompt person out of range");
    Mask m = row[static_cast<size_t>(prompts.person)];

    uint64_t call = calls_[{prompts.frame, prompts.person}]++;
    KeyedRng rng(seed_, {0x5E6Dull, static_cast<uint64_t>(prompts.frame),
                         static_cast<uint64_t>(prompts.person), call});
    if (radius_ > 0) {
      int r = static_cast<int>(rng.uniform(0.0, 2.0 * radius_ + 1.0)) - radius_;
      if (r > 0) m = mask_dilate(m, r);
      if (r < 0) m = mask_erode(m, -r);
    }
    if (flip_ > 0.0) flip_boundary(m, rng);
    snap_to_prompts(m, prompts);
    return m;
  }

 private:
  void flip_boundary(Mask& m, KeyedRng& rng) const {
    Mask ref = m;
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        bool boundary = false;
        uint8_t v = ref.at(x, y);
        for (int dy = -1; dy <= 1 && !boundary; ++dy)
          for (int dx = -1; dx <= 1 && !boundary; ++dx) {
            int nx = x + dx, ny = y + dy;
            if (nx < 0 || ny < 0 || nx >= m.w || ny >= m.h) continue;
            if (ref.at(nx, ny) != v) boundary = true;
          }
        if (boundary && rng.uniform() < flip_) m.at(x, y) = v ? 0 : 1;
      }
  }

  static void paint_disk(Mask& m, const PixelPoint& c, int rho, uint8_t value) {
    for (int dy = -rho; dy <= rho; ++dy)
      for (int dx = -rho; dx <= rho; ++dx) {
        if (dx * dx + dy * dy > rho * rho) continue;
        int x = c.x + dx, y = c.y + dy;
        if (x < 0 || y < 0 || x >= m.w || y >= m.h) continue;
        m.at(x, y) = value;
      }
  }

  //! Repairs prompt violations: disks around violated prompts first (so the
  //! fix looks like a regional correction), exact pixels last (so the
  //! postcondition holds bit-exactly). A conflict-free prompt set leaves a
  //! violation-free mask untouched.
  static void snap_to_prompts(Mask& m, const PromptSet& prompts) {
    constexpr int kSnapRadius = 3;
    std::vector<PixelPoint> bad_neg, bad_pos;
    for (const PixelPoint& pt : prompts.negative)
      if (m.at(pt.x, pt.y)) bad_neg.push_back(pt);
    for (const PixelPoint& pt : prompts.positive)
      if (!m.at(pt.x, pt.y)) bad_pos.push_back(pt);
    for (const PixelPoint& pt : bad_neg) paint_disk(m, pt, kSnapRadius, 0);
    for (const PixelPoint& pt : bad_pos) paint_disk(m, pt, kSnapRadius, 1);
    for (const PixelPoint& pt : prompts.negative) m.at(pt.x, pt.y) = 0;
    for (const PixelPoint& pt : prompts.positive) m.at(pt.x, pt.y) = 1;
  }

  std::vector<std::vector<Mask>> gt_;
  int radius_;
  double flip_;
  uint64_t seed_;
  std::map<std::pair<int, int>, uint64_t> calls_;
};

// ---------------------------------------------------------------------------
// External segmenter adapter (PNG + JSON file exchange)
// ---------------------------------------------------------------------------

//! Runs an external command per (frame, person): writes the image, the mesh
//! silhouette, and a JSON prompt file into `work_dir`, substitutes {prompt}
//! and {output} in the command template, and reads the resulting PNG mask.
//! Any failure throws DataError, which a refresh turns into a stale entry.
class ExternalSegmenter final : public SegmenterInterface {
 public:
  ExternalSegmenter(std::string command_template, std::string work_dir)
      : command_(std::move(command_template)), dir_(std::move(work_dir)) {
    if (command_.find("{prompt}") == std::string::npos ||
        command_.find("{output}") == std::string::npos)
      throw ConfigError("ExternalSegmenter: command template needs {prompt} and {output}");
    std::filesystem::create_directories(dir_);
  }

  Mask segment(const Image& image, const PromptSet& prompts) override {
    std::string stem = dir_ + "/seg_f" + std::to_string(prompts.frame) + "_p" +
                       std::to_string(prompts.person);
    std::string mesh_path = stem + "_mesh.png";
    std::string prompt_path = stem + "_prompt.json";
    std::string out_path = stem + "_out.png";
    std::string image_path;
    if (image.w > 0 && image.h > 0) {
      image_path = stem + "_image.png";
      write_png(image_path, image);
    }
    write_mask_png(mesh_path, prompts.m_mesh);

    nlohmann::json j;
    j["frame"] = prompts.frame;
    j["person"] = prompts.person;
    j["image"] = image_path;
    j["mesh_mask"] = mesh_path;
    j["low_confidence"] = prompts.low_confidence;
    j["output"] = out_path;
    auto points = [](const std::vector<PixelPoint>& pts) {
      nlohmann::json a = nlohmann::json::array();
      for (const PixelPoint& p : pts) a.push_back({p.x, p.y});
      return a;
    };
    j["positive"] = points(prompts.positive);
    j["negative"] = points(prompts.negative);
    {
      std::ofstream f(prompt_path);
      if (!f) throw DataError("ExternalSegmenter: cannot write " + prompt_path);
      f << j.dump(2) << "\n";
    }

    std::string cmd = command_;
    replace_all(cmd, "{prompt}", prompt_path);
    replace_all(cmd, "{output}", out_path);
    std::remove(out_path.c_str());
    int rc = std::system(cmd.c_str());
    if (rc != 0) throw DataError("ExternalSegmenter: command failed with status " + std::to_string(rc));
    return read_mask_png(out_path);
  }

 private:
  static void replace_all(std::string& s, const std::string& from, const std::string& to) {
    for (size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
      s.replace(pos, from.size(), to);
  }

  std::string command_;
  std::string dir_;
};

}  // namespace strata
