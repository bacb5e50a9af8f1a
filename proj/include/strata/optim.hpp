#pragma once
// Alternating reconstruction optimiser. One render step draws rays from a
// batch of frames, rebuilds the per-ray composite on the tape through the
// pose-dependent inverse warp, and applies two gated parameter updates: frames
// whose masks agree with their posed templates (reliable) update the shared
// fields, background and density along with their own poses, while the
// remaining frames update their poses alone — shared state stays bit-for-bit
// untouched by them. A separate pose-refinement step drives only the poses
// with the depth-ordering and interpenetration penalties on the posed meshes.
// The whole training state round-trips through a binary checkpoint so a run
// can pause and resume without changing a single bit of its trajectory.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "strata/body.hpp"
#include "strata/camera.hpp"
#include "strata/field.hpp"
#include "strata/image.hpp"
#include "strata/losses.hpp"
#include "strata/mesh.hpp"
#include "strata/pose_tape.hpp"
#include "strata/raster.hpp"
#include "strata/render.hpp"
#include "strata/rng.hpp"
#include "strata/segment.hpp"
#include "strata/skinning.hpp"
#include "strata/tape.hpp"

namespace strata {

// ---------------------------------------------------------------------------
// Adam with named parameter blocks
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamSlot {
  Arr m, v;
  int64_t steps = 0;
};

//! Moment estimates keyed by block name. A block that is never applied keeps
//! no slot and its parameters are never rewritten, which is what guarantees
//! the bit-identity of gated state.
struct AdamState {
  std::map<std::string, AdamSlot> slots;
};

inline void adam_apply(AdamState& st, const AdamConfig& cfg, const std::string& name, MatX& param,
                       const Arr& grad) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols())
    throw DataError("adam_apply: gradient shape mismatch for block " + name);
  AdamSlot& s = st.slots[name];
  if (s.steps == 0) {
    s.m = Arr::Zero(param.rows(), param.cols());
    s.v = Arr::Zero(param.rows(), param.cols());
  }
  s.steps += 1;
  s.m = cfg.beta1 * s.m + (1.0 - cfg.beta1) * grad;
  s.v = cfg.beta2 * s.v + (1.0 - cfg.beta2) * grad.square();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.steps));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.steps));
  Arr update = cfg.lr * (s.m / c1) / ((s.v / c2).sqrt() + cfg.eps);
  param.array() -= update;
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

struct TrainState {
  uint64_t seed = 0;
  std::vector<ParamBody> bodies;               // per person, fixed during training
  std::vector<CanonicalField> fields;          // per person
  BackgroundField background;
  DensityParams density;
  std::vector<std::vector<PoseParams>> poses;  // [frame][person]
  MaskStore masks;
  AdamState adam;
  int epoch = 0;
  int outer_loop = 0;
  int64_t step_counter = 0;
  double lr_scale = 1.0;  // halved on every rejected step

  int persons() const { return static_cast<int>(fields.size()); }
  int frames() const { return static_cast<int>(poses.size()); }
};

inline void validate_train_state(const TrainState& st) {
  const int P = st.persons();
  if (P == 0 || st.frames() == 0) throw ConfigError("train state: need persons and frames");
  if (static_cast<int>(st.bodies.size()) != P) throw ConfigError("train state: body count mismatch");
  for (const auto& frame_poses : st.poses)
    if (static_cast<int>(frame_poses.size()) != P)
      throw ConfigError("train state: pose person count mismatch");
  for (int p = 0; p < P; ++p)
    if (st.fields[static_cast<size_t>(p)].joints != st.bodies[static_cast<size_t>(p)].joints)
      throw ConfigError("train state: field/body joint count mismatch");
  if (st.masks.frames != 0 &&
      (st.masks.frames != st.frames() || st.masks.persons != P))
    throw ConfigError("train state: mask store shape mismatch");
}

//! Fresh state: per-person fields seeded independently from the master seed,
//! a per-frame background, identity poses, and an empty mask store.
inline TrainState make_train_state(uint64_t seed, std::vector<ParamBody> bodies, int frames) {
  if (bodies.empty() || frames <= 0) throw ConfigError("make_train_state: need bodies and frames");
  TrainState st;
  st.seed = seed;
  st.bodies = std::move(bodies);
  const int P = static_cast<int>(st.bodies.size());
  st.fields.reserve(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    const ParamBody& b = st.bodies[static_cast<size_t>(p)];
    st.fields.push_back(make_canonical_field(rng_key({seed, 0xF1E1DULL, static_cast<uint64_t>(p)}),
                                             b.joints, enclosing_radius(b)));
  }
  st.background = make_background_field(rng_key({seed, 0xB6ULL}), frames);
  st.poses.assign(static_cast<size_t>(frames), {});
  for (auto& fp : st.poses)
    for (int p = 0; p < P; ++p) fp.emplace_back(st.bodies[static_cast<size_t>(p)].joints);
  st.masks = MaskStore(frames, P);
  return st;
}

//! Visits every shared learnable block as (name, matrix): the per-person
//! fields, the background, and the density transfer.
template <class Fn>
void for_each_shared_param(TrainState& st, Fn&& fn) {
  for (int p = 0; p < st.persons(); ++p) {
    std::string prefix = "field" + std::to_string(p) + ".";
    for_each_param(st.fields[static_cast<size_t>(p)],
                   [&](const char* name, MatX& m) { fn(prefix + name, m); });
  }
  for_each_param(st.background, [&](const char* name, MatX& m) { fn(std::string("bg.") + name, m); });
  for_each_param(st.density, [&](const char* name, MatX& m) { fn(std::string("density.") + name, m); });
}

inline std::string pose_block_name(int frame, int person) {
  return "pose.f" + std::to_string(frame) + ".p" + std::to_string(person);
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace ckpt {

constexpr char kMagic[8] = {'S', 'T', 'R', 'A', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void put_u32(std::ostream& os, uint32_t v) { put_bytes(os, &v, 4); }
inline void put_i32(std::ostream& os, int32_t v) { put_bytes(os, &v, 4); }
inline void put_i64(std::ostream& os, int64_t v) { put_bytes(os, &v, 8); }
inline void put_u64(std::ostream& os, uint64_t v) { put_bytes(os, &v, 8); }
inline void put_f64(std::ostream& os, double v) { put_bytes(os, &v, 8); }
inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  put_bytes(os, s.data(), s.size());
}
template <class M>
void put_matlike(std::ostream& os, const M& m) {
  put_i32(os, static_cast<int32_t>(m.rows()));
  put_i32(os, static_cast<int32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(os, m(i, j));
}
inline void put_mask(std::ostream& os, const Mask& m) {
  put_i32(os, m.w);
  put_i32(os, m.h);
  if (!m.v.empty()) put_bytes(os, m.v.data(), m.v.size());
}

inline void get_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw DataError("checkpoint: truncated or unreadable");
}
inline uint32_t get_u32(std::istream& is) { uint32_t v; get_bytes(is, &v, 4); return v; }
inline int32_t get_i32(std::istream& is) { int32_t v; get_bytes(is, &v, 4); return v; }
inline int64_t get_i64(std::istream& is) { int64_t v; get_bytes(is, &v, 8); return v; }
inline uint64_t get_u64(std::istream& is) { uint64_t v; get_bytes(is, &v, 8); return v; }
inline double get_f64(std::istream& is) { double v; get_bytes(is, &v, 8); return v; }
inline std::string get_str(std::istream& is) {
  uint32_t n = get_u32(is);
  if (n > (1u << 24)) throw DataError("checkpoint: implausible string length");
  std::string s(n, '\0');
  if (n) get_bytes(is, s.data(), n);
  return s;
}
template <class M>
M get_matlike(std::istream& is) {
  int32_t r = get_i32(is), c = get_i32(is);
  if (r < 0 || c < 0 || static_cast<int64_t>(r) * c > (int64_t(1) << 28))
    throw DataError("checkpoint: implausible matrix shape");
  M m(r, c);
  for (int32_t i = 0; i < r; ++i)
    for (int32_t j = 0; j < c; ++j) m(i, j) = get_f64(is);
  return m;
}
inline Mask get_mask(std::istream& is) {
  int32_t w = get_i32(is), h = get_i32(is);
  if (w < 0 || h < 0 || static_cast<int64_t>(w) * h > (int64_t(1) << 28))
    throw DataError("checkpoint: implausible mask shape");
  Mask m(w, h);
  if (!m.v.empty()) get_bytes(is, m.v.data(), m.v.size());
  return m;
}

inline void put_body(std::ostream& os, const ParamBody& b) {
  put_i32(os, b.joints);
  for (const auto& n : b.names) put_str(os, n);
  for (int pj : b.parents) put_i32(os, pj);
  for (const auto& r : b.rest) put_matlike(os, MatX(r));
  put_u32(os, static_cast<uint32_t>(b.radius.size()));
  for (double r : b.radius) put_f64(os, r);
  put_u32(os, static_cast<uint32_t>(b.verts.size()));
  for (const auto& v : b.verts) put_matlike(os, MatX(v));
  put_matlike(os, b.weights);
  put_u32(os, static_cast<uint32_t>(b.keypoints.size()));
  for (int k : b.keypoints) put_i32(os, k);
}

inline ParamBody get_body(std::istream& is) {
  ParamBody b;
  b.joints = get_i32(is);
  if (b.joints <= 0 || b.joints > 4096) throw DataError("checkpoint: implausible joint count");
  b.names.resize(static_cast<size_t>(b.joints));
  for (auto& n : b.names) n = get_str(is);
  b.parents.resize(static_cast<size_t>(b.joints));
  for (auto& pj : b.parents) pj = get_i32(is);
  b.rest.resize(static_cast<size_t>(b.joints));
  for (auto& r : b.rest) r = Vec3(get_matlike<MatX>(is));
  b.radius.resize(get_u32(is));
  for (auto& r : b.radius) r = get_f64(is);
  b.verts.resize(get_u32(is));
  for (auto& v : b.verts) v = Vec3(get_matlike<MatX>(is));
  b.weights = get_matlike<MatX>(is);
  b.keypoints.resize(get_u32(is));
  for (auto& k : b.keypoints) k = get_i32(is);
  validate_body(b);
  return b;
}

}  // namespace ckpt

inline void save_checkpoint(const TrainState& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("save_checkpoint: cannot open " + path);
  using namespace ckpt;
  put_bytes(os, kMagic, 8);
  put_u32(os, kVersion);
  put_u64(os, st.seed);
  put_i32(os, st.persons());
  put_i32(os, st.frames());
  for (const auto& b : st.bodies) put_body(os, b);
  for (const auto& f : st.fields) {
    put_i32(os, f.freqs);
    put_i32(os, f.joints);
    put_i32(os, f.width);
    put_f64(os, f.sphere_radius);
    for_each_param(const_cast<CanonicalField&>(f),
                   [&](const char*, MatX& m) { put_matlike(os, m); });
  }
  put_i32(os, st.background.freqs);
  put_i32(os, st.background.width);
  for_each_param(const_cast<BackgroundField&>(st.background),
                 [&](const char*, MatX& m) { put_matlike(os, m); });
  for_each_param(const_cast<DensityParams&>(st.density),
                 [&](const char*, MatX& m) { put_matlike(os, m); });
  for (const auto& fp : st.poses)
    for (const auto& pose : fp) put_matlike(os, MatX(pose.flatten()));
  put_i32(os, st.masks.frames);
  put_i32(os, st.masks.persons);
  for (const auto& e : st.masks.entries) {
    put_mask(os, e.m_sam);
    put_mask(os, e.m_mesh);
    put_i32(os, e.refresh_epoch);
    put_u32(os, e.low_confidence ? 1u : 0u);
    put_u32(os, e.stale ? 1u : 0u);
  }
  put_u32(os, static_cast<uint32_t>(st.adam.slots.size()));
  for (const auto& [name, slot] : st.adam.slots) {
    put_str(os, name);
    put_i64(os, slot.steps);
    put_matlike(os, slot.m);
    put_matlike(os, slot.v);
  }
  put_i32(os, st.epoch);
  put_i32(os, st.outer_loop);
  put_i64(os, st.step_counter);
  put_f64(os, st.lr_scale);
  os.flush();
  if (!os) throw DataError("save_checkpoint: write failed for " + path);
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_checkpoint: cannot open " + path);
  using namespace ckpt;
  char magic[8];
  get_bytes(is, magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw DataError("load_checkpoint: bad magic in " + path);
  if (get_u32(is) != kVersion) throw DataError("load_checkpoint: unsupported version in " + path);
  TrainState st;
  st.seed = get_u64(is);
  const int P = get_i32(is);
  const int F = get_i32(is);
  if (P <= 0 || F <= 0 || P > 1024) throw DataError("load_checkpoint: implausible counts");
  st.bodies.reserve(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) st.bodies.push_back(get_body(is));
  st.fields.resize(static_cast<size_t>(P));
  for (auto& f : st.fields) {
    f.freqs = get_i32(is);
    f.joints = get_i32(is);
    f.width = get_i32(is);
    f.sphere_radius = get_f64(is);
    for_each_param(f, [&](const char*, MatX& m) { m = get_matlike<MatX>(is); });
  }
  st.background.freqs = get_i32(is);
  st.background.width = get_i32(is);
  for_each_param(st.background, [&](const char*, MatX& m) { m = get_matlike<MatX>(is); });
  for_each_param(st.density, [&](const char*, MatX& m) { m = get_matlike<MatX>(is); });
  st.poses.assign(static_cast<size_t>(F), {});
  for (auto& fp : st.poses) {
    fp.reserve(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p)
      fp.push_back(PoseParams::unflatten(VecX(get_matlike<MatX>(is))));
  }
  const int mf = get_i32(is), mp = get_i32(is);
  if (mf > 0 && mp > 0) {
    st.masks = MaskStore(mf, mp);
    for (auto& e : st.masks.entries) {
      e.m_sam = get_mask(is);
      e.m_mesh = get_mask(is);
      e.refresh_epoch = get_i32(is);
      e.low_confidence = get_u32(is) != 0;
      e.stale = get_u32(is) != 0;
    }
  }
  const uint32_t n_slots = get_u32(is);
  for (uint32_t i = 0; i < n_slots; ++i) {
    std::string name = get_str(is);
    AdamSlot slot;
    slot.steps = get_i64(is);
    slot.m = get_matlike<Arr>(is);
    slot.v = get_matlike<Arr>(is);
    st.adam.slots.emplace(std::move(name), std::move(slot));
  }
  st.epoch = get_i32(is);
  st.outer_loop = get_i32(is);
  st.step_counter = get_i64(is);
  st.lr_scale = get_f64(is);
  validate_train_state(st);
  return st;
}

//! FNV-1a digest of a checkpoint file, as sixteen hex digits. Two runs that
//! followed the same trajectory produce byte-identical checkpoints and so the
//! same digest.
inline std::string checkpoint_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint_hash: cannot open " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

// ---------------------------------------------------------------------------
// Optimisation steps
// ---------------------------------------------------------------------------

struct StepConfig {
  int rays_per_frame = 24;
  int samples_per_person = 16;
  AdamConfig fields_opt{5e-4, 0.9, 0.999, 1e-8};
  AdamConfig poses_opt{1e-4, 0.9, 0.999, 1e-8};
  LossWeights weights;
  int eikonal_uniform = 16;
  int eikonal_surface = 16;
  double eikonal_sigma = 0.05;
  size_t max_disputed = 128;
  int interpenetration_stride = 4;
  std::ostream* log = nullptr;  // optional plain-text event log
};

struct StepReport {
  bool applied = false;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double rgb = 0.0, mask = 0.0, eikonal = 0.0;
  double depth_order = 0.0, interpenetration = 0.0;
  int rays = 0;
};

//! A batch of frame indices with their reliability flags.
struct FrameBatch {
  std::vector<int> frames;
  std::vector<char> reliable;
};

namespace detail {

//! Deterministic pixel draw for one frame: half the rays target pixels where
//! any current mask places a person, the rest are uniform over the image.
inline std::vector<std::pair<int, int>> pick_pixels(const TrainState& st, int frame, int width,
                                                    int height, int count) {
  KeyedRng rng(st.seed, {0xBA7CULL, static_cast<uint64_t>(st.step_counter),
                         static_cast<uint64_t>(frame)});
  std::vector<int> on_pixels;
  if (st.masks.frames > 0) {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        bool on = false;
        for (int p = 0; p < st.masks.persons && !on; ++p) {
          const MaskEntry& e = st.masks.at(frame, p);
          if (e.m_sam.w == width && e.m_sam.h == height && e.m_sam.at(x, y)) on = true;
          if (!on && e.m_mesh.w == width && e.m_mesh.h == height && e.m_mesh.at(x, y)) on = true;
        }
        if (on) on_pixels.push_back(y * width + x);
      }
  }
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    int flat;
    if (!on_pixels.empty() && i % 2 == 0) {
      flat = on_pixels[rng.below(on_pixels.size())];
    } else {
      flat = static_cast<int>(rng.below(static_cast<uint64_t>(width) * height));
    }
    out.emplace_back(flat % width, flat / width);
  }
  return out;
}

struct FramePersonLeaves {
  Var pose;   // 1 x (3 + 3J)
  FkTape fk;
};

}  // namespace detail

//! One gradient step of the volumetric objective over a frame batch. Builds
//! the whole computation on a tape, then applies two updates from the same
//! iterate: the reliable frames' loss updates fields, background, density and
//! those frames' poses; the unreliable frames' loss updates their poses only.
//! A non-finite loss rejects the step, halves the learning-rate scale and
//! leaves every parameter untouched.
inline StepReport optimize_render_step(TrainState& st, const Camera& cam,
                                       const std::vector<Image>& images, const FrameBatch& batch,
                                       const StepConfig& cfg) {
  validate_train_state(st);
  validate_weights(cfg.weights);
  if (batch.frames.size() != batch.reliable.size() || batch.frames.empty())
    throw ConfigError("optimize_render_step: malformed frame batch");
  if (cfg.rays_per_frame < 1 || cfg.samples_per_person < 2)
    throw ConfigError("optimize_render_step: need rays and at least two samples per person");
  if (static_cast<int>(images.size()) != st.frames())
    throw DataError("optimize_render_step: image count mismatch");
  const int P = st.persons();

  Tape t;
  std::vector<FieldVars> fv;
  fv.reserve(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p)
    fv.push_back(field_leaves(t, st.fields[static_cast<size_t>(p)], "field" + std::to_string(p)));
  BgVars bg = background_leaves(t, st.background, "bg");
  Var da = t.leaf(st.density.a);
  Var db = t.leaf(st.density.b);

  std::map<std::pair<int, int>, detail::FramePersonLeaves> fp_leaves;
  for (int f : batch.frames)
    for (int p = 0; p < P; ++p) {
      detail::FramePersonLeaves L;
      L.pose = t.leaf(MatX(st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)].flatten().transpose()));
      L.fk = fk_tape(t, st.bodies[static_cast<size_t>(p)], L.pose);
      fp_leaves.emplace(std::make_pair(f, p), std::move(L));
    }

  std::vector<Var> rel_color, unrel_color, rel_opac, unrel_opac;
  std::vector<MatX> rel_gt, unrel_gt, rel_target, unrel_target;
  int total_rays = 0;

  for (size_t bi = 0; bi < batch.frames.size(); ++bi) {
    const int f = batch.frames[bi];
    if (f < 0 || f >= st.frames()) throw ConfigError("optimize_render_step: frame out of range");
    const Image& img = images[static_cast<size_t>(f)];
    if (img.w != cam.width || img.h != cam.height || img.c < 3)
      throw DataError("optimize_render_step: image does not match the camera");

    std::vector<PersonModel> persons;
    persons.reserve(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p)
      persons.push_back(make_person_model(st.fields[static_cast<size_t>(p)],
                                          st.bodies[static_cast<size_t>(p)],
                                          st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)]));

    auto pixels = detail::pick_pixels(st, f, cam.width, cam.height, cfg.rays_per_frame);
    std::vector<Var> colors, opacs, tends;
    MatX gt(static_cast<Eigen::Index>(pixels.size()), 3);
    MatX target = MatX::Zero(static_cast<Eigen::Index>(pixels.size()), P);
    MatX dirs(static_cast<Eigen::Index>(pixels.size()), 3);

    for (size_t ri = 0; ri < pixels.size(); ++ri) {
      const auto [x, y] = pixels[ri];
      Ray ray = make_ray(cam, x, y);
      dirs.row(static_cast<Eigen::Index>(ri)) = ray.dir.transpose();
      for (int ch = 0; ch < 3; ++ch) gt(static_cast<Eigen::Index>(ri), ch) = img.at(x, y, ch);
      if (st.masks.frames > 0)
        for (int p = 0; p < P; ++p) {
          const MaskEntry& e = st.masks.at(f, p);
          if (e.m_sam.w == img.w && e.m_sam.h == img.h)
            target(static_cast<Eigen::Index>(ri), p) = e.m_sam.at(x, y) ? 1.0 : 0.0;
          else if (e.m_mesh.w == img.w && e.m_mesh.h == img.h)
            target(static_cast<Eigen::Index>(ri), p) = e.m_mesh.at(x, y) ? 1.0 : 0.0;
        }

      const uint64_t ray_id = static_cast<uint64_t>(st.step_counter) * cam.width * cam.height +
                              static_cast<uint64_t>(y) * cam.width + static_cast<uint64_t>(x);
      RaySampleSet set = sample_points_on_ray(ray, persons, st.density, cfg.samples_per_person,
                                              st.seed, f, ray_id);
      std::vector<Var> o(static_cast<size_t>(P)), c(static_cast<size_t>(P));
      for (int p = 0; p < P; ++p) {
        const PersonSamples& ps = set.person[static_cast<size_t>(p)];
        if (!ps.hit || ps.z.size() == 0) continue;
        const ParamBody& body = st.bodies[static_cast<size_t>(p)];
        MatX W(ps.z.size(), body.joints);
        for (Eigen::Index i = 0; i < ps.z.size(); ++i) {
          const int nn = ps.nn_vertex[static_cast<size_t>(i)];
          if (nn < 0) throw NumericalError("optimize_render_step: sample without a warp vertex");
          W.row(i) = body.weights.row(nn);
        }
        const auto& L = fp_leaves.at({f, p});
        Var blend = blend_rigid_tape(t, L.fk, W);
        Var Xc = inverse_blend_tape(t, blend, ps.x_d);
        FieldTapeEval fe = field_forward_tape(t, fv[static_cast<size_t>(p)],
                                              st.fields[static_cast<size_t>(p)], Xc, L.pose,
                                              /*want_color=*/true, /*want_grad=*/false);
        Var sigma = sdf_to_density_tape(t, fe.s, da, db);
        Var o_p = t.add_scalar(t.neg(t.exp(t.neg(t.mul(sigma, t.constant(MatX(ps.delta)))))), 1.0);
        o[static_cast<size_t>(p)] = o_p;
        c[static_cast<size_t>(p)] = fe.c;
      }
      RayCompositeTape rc = composite_ray_tape(t, o, c, merged_order(set));
      colors.push_back(rc.c_h);
      opacs.push_back(t.transpose(rc.opacity));
      tends.push_back(rc.t_end);
    }

    Var c_h_all = t.concat_rows(colors);
    Var t_end_all = t.concat_rows(tends);
    Var bg_all = background_tape(t, bg, st.background, t.constant(dirs), f);
    Var color_all = c_h_all + t.mul(t_end_all, bg_all);
    Var opac_all = t.concat_rows(opacs);
    total_rays += static_cast<int>(pixels.size());

    if (batch.reliable[bi]) {
      rel_color.push_back(color_all);
      rel_opac.push_back(opac_all);
      rel_gt.push_back(gt);
      rel_target.push_back(target);
    } else {
      unrel_color.push_back(color_all);
      unrel_opac.push_back(opac_all);
      unrel_gt.push_back(gt);
      unrel_target.push_back(target);
    }
  }

  auto stack = [](const std::vector<MatX>& parts) {
    Eigen::Index rows = 0;
    for (const auto& m : parts) rows += m.rows();
    MatX out(rows, parts.empty() ? 0 : parts.front().cols());
    Eigen::Index at = 0;
    for (const auto& m : parts) {
      out.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    return out;
  };

  StepReport rep;
  rep.rays = total_rays;
  Var loss_rel, loss_unrel;
  std::vector<int> rel_frames, unrel_frames;
  for (size_t bi = 0; bi < batch.frames.size(); ++bi)
    (batch.reliable[bi] ? rel_frames : unrel_frames).push_back(batch.frames[bi]);

  if (!rel_color.empty()) {
    Var rgb = loss_rgb_tape(t, t.concat_rows(rel_color), stack(rel_gt));
    Var msk = loss_mask_tape(t, t.concat_rows(rel_opac), stack(rel_target));
    Var eik = t.constant_scalar(0.0);
    for (int p = 0; p < P; ++p) {
      KeyedRng erng(st.seed, {0xE1C0ULL, static_cast<uint64_t>(st.step_counter),
                              static_cast<uint64_t>(p)});
      MatX pts = eikonal_sample_points(st.bodies[static_cast<size_t>(p)],
                                       st.fields[static_cast<size_t>(p)].sphere_radius,
                                       cfg.eikonal_uniform, cfg.eikonal_surface,
                                       cfg.eikonal_sigma, erng);
      const auto& L = fp_leaves.at({rel_frames.front(), p});
      FieldTapeEval fe = field_forward_tape(t, fv[static_cast<size_t>(p)],
                                            st.fields[static_cast<size_t>(p)], t.constant(pts),
                                            L.pose, /*want_color=*/false, /*want_grad=*/true);
      eik = eik + eikonal_from_grad(t, fe.grad);
    }
    loss_rel = t.scale(rgb, cfg.weights.rgb) + t.scale(msk, cfg.weights.mask) +
               t.scale(eik, cfg.weights.eikonal);
    rep.rgb += t.value(rgb)(0, 0);
    rep.mask += t.value(msk)(0, 0);
    rep.eikonal = t.value(eik)(0, 0);
  }
  if (!unrel_color.empty()) {
    Var rgb = loss_rgb_tape(t, t.concat_rows(unrel_color), stack(unrel_gt));
    Var msk = loss_mask_tape(t, t.concat_rows(unrel_opac), stack(unrel_target));
    loss_unrel = t.scale(rgb, cfg.weights.rgb) + t.scale(msk, cfg.weights.mask);
    rep.rgb += t.value(rgb)(0, 0);
    rep.mask += t.value(msk)(0, 0);
  }

  double total = 0.0;
  if (loss_rel.valid()) total += t.value(loss_rel)(0, 0);
  if (loss_unrel.valid()) total += t.value(loss_unrel)(0, 0);
  rep.loss = total;
  st.step_counter += 1;
  if (!std::isfinite(total)) {
    st.lr_scale *= 0.5;
    if (cfg.log)
      (*cfg.log) << "step " << (st.step_counter - 1)
                 << " rejected: non-finite loss; lr_scale -> " << st.lr_scale << "\n";
    return rep;
  }

  std::map<std::string, MatX*> registry;
  for_each_shared_param(st, [&](const std::string& name, MatX& m) { registry[name] = &m; });

  AdamConfig fopt = cfg.fields_opt;
  fopt.lr *= st.lr_scale;
  AdamConfig popt = cfg.poses_opt;
  popt.lr *= st.lr_scale;

  auto apply_pose = [&](int f, int p) {
    const auto& L = fp_leaves.at({f, p});
    MatX row = st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)].flatten().transpose();
    adam_apply(st.adam, popt, pose_block_name(f, p), row, t.grad(L.pose));
    st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)] =
        PoseParams::unflatten(VecX(row.transpose()));
  };

  if (loss_rel.valid()) {
    t.backward(loss_rel);
    for (int p = 0; p < P; ++p)
      for (const auto& [name, var] : fv[static_cast<size_t>(p)].named)
        adam_apply(st.adam, fopt, name, *registry.at(name), t.grad(var));
    for (const auto& [name, var] : bg.named) adam_apply(st.adam, fopt, name, *registry.at(name), t.grad(var));
    adam_apply(st.adam, fopt, "density.a", st.density.a, t.grad(da));
    adam_apply(st.adam, fopt, "density.b", st.density.b, t.grad(db));
    for (int f : rel_frames)
      for (int p = 0; p < P; ++p) apply_pose(f, p);
  }
  if (loss_unrel.valid()) {
    t.backward(loss_unrel);
    for (int f : unrel_frames)
      for (int p = 0; p < P; ++p) apply_pose(f, p);
  }
  rep.applied = true;
  return rep;
}

// ---------------------------------------------------------------------------
// Pose refinement on posed meshes
// ---------------------------------------------------------------------------

//! Per-person canonical-pose surface meshes with their skinning weights,
//! rebuilt whenever the fields change enough to matter (each mask refresh).
struct MeshCache {
  std::vector<TriMesh> canon;   // canonical-pose surfaces
  std::vector<MatX> weights;    // verts x joints
  std::vector<MatX> canon_pts;  // verts x 3, matrix form for the tape
};

inline MeshCache build_mesh_cache(const TrainState& st, int resolution) {
  MeshCache mc;
  const int P = st.persons();
  mc.canon.resize(static_cast<size_t>(P));
  mc.weights.resize(static_cast<size_t>(P));
  mc.canon_pts.resize(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    const ParamBody& body = st.bodies[static_cast<size_t>(p)];
    PoseParams ref(body.joints);
    TriMesh m = extract_canonical_mesh(st.fields[static_cast<size_t>(p)], ref, resolution);
    mc.canon[static_cast<size_t>(p)] = m;
    if (m.verts.empty()) continue;
    mc.weights[static_cast<size_t>(p)] = weights_for_canonical_points(body, m.verts);
    MatX pts(static_cast<Eigen::Index>(m.verts.size()), 3);
    for (size_t i = 0; i < m.verts.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = m.verts[i].transpose();
    mc.canon_pts[static_cast<size_t>(p)] = pts;
  }
  return mc;
}

//! Deforms every cached canonical mesh into one frame's world space.
inline std::vector<TriMesh> posed_meshes_for_frame(const TrainState& st, const MeshCache& mc,
                                                   int frame) {
  const int P = st.persons();
  std::vector<TriMesh> out(static_cast<size_t>(P));
  for (int p = 0; p < P; ++p) {
    const TriMesh& canon = mc.canon[static_cast<size_t>(p)];
    if (canon.verts.empty()) continue;
    TriMesh posed;
    posed.faces = canon.faces;
    posed.verts = lbs_forward(st.bodies[static_cast<size_t>(p)],
                              st.poses[static_cast<size_t>(frame)][static_cast<size_t>(p)],
                              canon.verts, mc.weights[static_cast<size_t>(p)]);
    out[static_cast<size_t>(p)] = std::move(posed);
  }
  return out;
}

//! One pose-only step on a set of frames: the depth-ordering penalty on
//! contested pixels plus the interpenetration penalty, differentiated through
//! the skinning into each frame's poses. Fields, background and density are
//! not part of the computation, so they are bit-for-bit unchanged.
inline StepReport optimize_pose_refine_step(TrainState& st, const Camera& cam,
                                            const MeshCache& mc, const std::vector<int>& frames,
                                            const StepConfig& cfg) {
  validate_train_state(st);
  validate_weights(cfg.weights);
  StepReport rep;
  AdamConfig popt = cfg.poses_opt;
  popt.lr *= st.lr_scale;
  const int P = st.persons();
  double total = 0.0;
  bool any = false;

  for (int f : frames) {
    if (f < 0 || f >= st.frames()) throw ConfigError("optimize_pose_refine_step: frame out of range");
    std::vector<TriMesh> posed = posed_meshes_for_frame(st, mc, f);
    RasterOutput raster = rasterize_instances(posed, cam);
    std::vector<const Mask*> m_sam(static_cast<size_t>(P), nullptr);
    if (st.masks.frames > 0)
      for (int p = 0; p < P; ++p) {
        const MaskEntry& e = st.masks.at(f, p);
        if (e.m_sam.w == cam.width && e.m_sam.h == cam.height)
          m_sam[static_cast<size_t>(p)] = &e.m_sam;
      }
    std::vector<DisputedPixel> disputed =
        find_disputed_pixels(raster, m_sam, posed, f, cfg.max_disputed, st.seed);
    std::vector<InterPair> pairs =
        find_interpenetration_pairs(posed, cfg.interpenetration_stride);
    if (disputed.empty() && pairs.empty()) continue;

    Tape t;
    std::vector<Var> pose_leaves(static_cast<size_t>(P));
    std::vector<Var> posed_verts(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) {
      pose_leaves[static_cast<size_t>(p)] = t.leaf(
          MatX(st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)].flatten().transpose()));
      if (mc.canon[static_cast<size_t>(p)].verts.empty()) continue;
      FkTape fk = fk_tape(t, st.bodies[static_cast<size_t>(p)], pose_leaves[static_cast<size_t>(p)]);
      Var blend = blend_rigid_tape(t, fk, mc.weights[static_cast<size_t>(p)]);
      posed_verts[static_cast<size_t>(p)] =
          lbs_apply_tape(t, blend, mc.canon_pts[static_cast<size_t>(p)]);
    }
    Var loss = t.constant_scalar(0.0);
    if (!disputed.empty()) {
      Var d = loss_depth_order_tape(t, cam, posed_verts, disputed);
      rep.depth_order += t.value(d)(0, 0);
      loss = loss + t.scale(d, cfg.weights.depth_order);
    }
    if (!pairs.empty()) {
      Var ip = loss_interpenetration_tape(t, posed_verts, pairs);
      rep.interpenetration += t.value(ip)(0, 0);
      loss = loss + t.scale(ip, cfg.weights.interpenetration);
    }
    const double value = t.value(loss)(0, 0);
    st.step_counter += 1;
    if (!std::isfinite(value)) {
      st.lr_scale *= 0.5;
      popt.lr = cfg.poses_opt.lr * st.lr_scale;
      if (cfg.log)
        (*cfg.log) << "pose step frame " << f << " rejected: non-finite loss; lr_scale -> "
                   << st.lr_scale << "\n";
      continue;
    }
    total += value;
    any = true;
    t.backward(loss);
    for (int p = 0; p < P; ++p) {
      MatX row = st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)].flatten().transpose();
      adam_apply(st.adam, popt, pose_block_name(f, p), row,
                 t.grad(pose_leaves[static_cast<size_t>(p)]));
      st.poses[static_cast<size_t>(f)][static_cast<size_t>(p)] =
          PoseParams::unflatten(VecX(row.transpose()));
    }
    rep.applied = true;
  }
  rep.loss = any ? total : 0.0;
  return rep;
}

}  // namespace strata
