#pragma once

// Camera-incremental identity streams generated directly in feature space.
// Identities are frozen latent points; each camera applies its own
// near-identity linear transform plus offset and noise. Learners only see the
// TrainSplit of a step, which carries intra-camera labels and nothing else.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "extendova/errors.hpp"
#include "extendova/numerics/rng.hpp"
#include "extendova/numerics/tensor.hpp"

namespace extendova::stream {

using num::Rng;
using num::Tensor;

enum class Setup { general, exceptional };

inline const char* to_string(Setup s) { return s == Setup::general ? "general" : "exceptional"; }

inline Setup setup_from_string(const std::string& s) {
  if (s == "general") return Setup::general;
  if (s == "exceptional") return Setup::exceptional;
  throw ConfigError("setup: expected 'general' or 'exceptional', got '" + s + "'");
}

struct StreamConfig {
  int num_steps = 3;
  int initial_cameras = 4;
  int cameras_per_step = 1;
  int initial_ids = 120;
  int initial_views_per_id = 2;  // distinct initial cameras observing each identity
  int ids_per_camera = 100;
  int samples_per_id = 8;        // per identity per camera
  int test_initial_ids = 60;
  int test_ids_per_camera = 50;
  int test_samples_per_id = 4;
  double test_overlap = 0.6;
  std::vector<double> overlap_fraction = {0.45, 0.35};  // one entry per step t >= 2
  double domain_shift = 0.06;  // sigma_A
  double offset_std = 0.3;
  double noise_std = 0.4;
  int d_latent = 16;
  int d_in = 64;
  Setup setup = Setup::general;
  bool step1_global_labels = true;
  std::uint64_t seed = 0;

  [[nodiscard]] double overlap_at(int step) const {
    return overlap_fraction.at(static_cast<std::size_t>(step - 2));
  }

  void validate() const {
    auto need = [](bool ok, const std::string& key, const std::string& what) {
      if (!ok) throw ConfigError(key + ": " + what);
    };
    need(num_steps >= 2, "num_steps", "must be at least 2");
    need(initial_cameras >= 1, "initial_cameras", "must be positive");
    need(cameras_per_step >= 1, "cameras_per_step", "must be positive");
    need(initial_ids >= 2, "initial_ids", "need at least two identities");
    need(initial_views_per_id >= 1 && initial_views_per_id <= initial_cameras,
         "initial_views_per_id", "must lie in [1, initial_cameras]");
    need(ids_per_camera >= 1, "ids_per_camera", "must be positive");
    need(samples_per_id >= 1, "samples_per_id", "must be positive");
    need(test_initial_ids >= 0 && test_ids_per_camera >= 0, "test_ids_per_camera",
         "must be non-negative");
    need(test_samples_per_id >= 1, "test_samples_per_id", "must be positive");
    need(test_overlap >= 0.0 && test_overlap <= 1.0, "test_overlap", "must lie in [0, 1]");
    need(overlap_fraction.size() == static_cast<std::size_t>(num_steps - 1), "overlap_fraction",
         "needs one entry per incremental step");
    for (double o : overlap_fraction)
      need(o >= 0.0 && o <= 1.0, "overlap_fraction", "entries must lie in [0, 1]");
    need(domain_shift >= 0.0, "domain_shift", "must be non-negative");
    need(offset_std >= 0.0, "offset_std", "must be non-negative");
    need(noise_std >= 0.0, "noise_std", "must be non-negative");
    need(d_latent >= 1 && d_in >= d_latent, "d_in", "must be at least d_latent");
    if (setup == Setup::general) {
      // Unseen classes dominate and their count does not shrink.
      double prev_unseen = 0.0;
      for (double o : overlap_fraction) {
        need(o <= 0.5, "overlap_fraction", "general setup requires seen <= unseen per step");
        const double unseen = std::round((1.0 - o) * ids_per_camera);
        need(unseen >= prev_unseen, "overlap_fraction",
             "general setup requires a non-decreasing unseen count");
        prev_unseen = unseen;
      }
    } else {
      for (double o : overlap_fraction)
        need(o > 0.5, "overlap_fraction", "exceptional setup requires seen > unseen per step");
    }
  }
};

/// Defaults for the exceptional regime: a larger initial identity pool and
/// mostly re-appearing identities in every new camera.
inline StreamConfig exceptional_defaults() {
  StreamConfig c;
  c.setup = Setup::exceptional;
  c.initial_ids = 200;
  c.overlap_fraction = {0.7, 0.65};
  return c;
}

struct IdentityLatent {
  int global_id = 0;
  Tensor z;
};

struct CameraModel {
  int camera_id = 0;
  Tensor A;  // d_in x d_latent
  Tensor b;  // d_in
  double noise_std = 0.0;
};

/// Near-identity camera: A = I + sigma * G with G standard normal.
inline CameraModel make_camera(int camera_id, int d_in, int d_latent, double shift,
                               double offset_std, double noise_std, Rng& rng) {
  CameraModel cam;
  cam.camera_id = camera_id;
  cam.A = Tensor::matrix(static_cast<std::size_t>(d_in), static_cast<std::size_t>(d_latent));
  for (int i = 0; i < d_in; ++i)
    for (int j = 0; j < d_latent; ++j)
      cam.A.at(i, j) = (i == j ? 1.0 : 0.0) + shift * rng.normal();
  cam.b = rng.normal_tensor({static_cast<std::size_t>(d_in)}, offset_std);
  cam.noise_std = noise_std;
  return cam;
}

/// x = A z + b + eps, eps ~ N(0, noise_std^2 I).
inline Tensor observe(const IdentityLatent& id, const CameraModel& cam, Rng& rng) {
  if (cam.A.cols() != id.z.size() || cam.A.rows() != cam.b.size())
    throw InvalidArgument("observe: dimension mismatch");
  Tensor x = cam.b;
  for (std::size_t i = 0; i < cam.A.rows(); ++i) {
    x[i] += num::dot(cam.A.row(i), std::span<const double>(id.z.data()));
    const double e = rng.normal();
    if (cam.noise_std > 0.0) x[i] += cam.noise_std * e;
  }
  return x;
}

/// Training view of a step: observations and intra-camera labels only.
struct TrainSplit {
  Tensor x;  // n x d_in
  std::vector<int> camera_id;
  std::vector<int> local_label;
  int num_classes = 0;

  [[nodiscard]] std::size_t size() const noexcept { return local_label.size(); }

  /// Sample indices grouped by local label.
  [[nodiscard]] std::vector<std::vector<std::size_t>> class_members() const {
    std::vector<std::vector<std::size_t>> m(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < local_label.size(); ++i)
      m[static_cast<std::size_t>(local_label[i])].push_back(i);
    return m;
  }
};

/// Held-out identities; every sample is a query and the gallery is built at
/// evaluation time from all encountered cameras.
struct TestSplit {
  Tensor x;
  std::vector<int> camera_id;
  std::vector<int> global_id;
  [[nodiscard]] std::size_t size() const noexcept { return global_id.size(); }

  void append(const TestSplit& other) {
    if (other.size() == 0) return;
    if (size() == 0) {
      *this = other;
      return;
    }
    std::vector<double> data = x.data();
    data.insert(data.end(), other.x.data().begin(), other.x.data().end());
    x = Tensor::matrix(size() + other.size(), x.cols(), std::move(data));
    camera_id.insert(camera_id.end(), other.camera_id.begin(), other.camera_id.end());
    global_id.insert(global_id.end(), other.global_id.begin(), other.global_id.end());
  }
};

struct ClassTruth {
  bool seen = false;   // global id present in an earlier step's train set
  int global_id = 0;
};

struct StepDataset {
  int step = 1;  // 1-based
  std::vector<int> cameras;
  TrainSplit train;
  TestSplit test;
  // Evaluation-only ground truth; no training-path function takes these.
  std::vector<ClassTruth> overlap_truth;  // indexed by local label
  std::vector<int> train_global_id;       // per train sample

  [[nodiscard]] int n_local_classes() const noexcept { return train.num_classes; }
  [[nodiscard]] int seen_count() const {
    return static_cast<int>(std::count_if(overlap_truth.begin(), overlap_truth.end(),
                                          [](const ClassTruth& c) { return c.seen; }));
  }
};

namespace detail {

struct View {
  int identity;  // index into the latent table
  int camera;    // index into the camera table
  int label;
};

inline void append_rows(std::vector<double>& dst, const Tensor& row) {
  dst.insert(dst.end(), row.data().begin(), row.data().end());
}

}  // namespace detail

/// Deterministic in cfg (including cfg.seed).
inline std::vector<StepDataset> generate_stream(const StreamConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  Rng latent_rng = root.split("latent");
  Rng camera_rng = root.split("camera");
  Rng select_rng = root.split("select");
  Rng observe_rng = root.split("observe");

  std::vector<IdentityLatent> ids;
  std::vector<CameraModel> cams;
  auto fresh_identity = [&]() {
    IdentityLatent id;
    id.global_id = static_cast<int>(ids.size());
    id.z = latent_rng.normal_tensor({static_cast<std::size_t>(cfg.d_latent)});
    ids.push_back(std::move(id));
    return static_cast<int>(ids.size()) - 1;
  };
  auto new_camera = [&]() {
    const int cid = static_cast<int>(cams.size());
    cams.push_back(make_camera(cid, cfg.d_in, cfg.d_latent, cfg.domain_shift, cfg.offset_std,
                               cfg.noise_std, camera_rng));
    return cid;
  };

  std::vector<int> train_pool, test_pool;  // identities of earlier steps
  std::vector<StepDataset> steps;

  auto materialize_train = [&](StepDataset& ds, const std::vector<detail::View>& views,
                               const std::set<int>& prior) {
    std::vector<double> data;
    int n_classes = 0;
    for (const auto& v : views) n_classes = std::max(n_classes, v.label + 1);
    ds.overlap_truth.assign(static_cast<std::size_t>(n_classes), ClassTruth{});
    for (const auto& v : views) {
      for (int s = 0; s < cfg.samples_per_id; ++s) {
        detail::append_rows(data, observe(ids[static_cast<std::size_t>(v.identity)],
                                          cams[static_cast<std::size_t>(v.camera)], observe_rng));
        ds.train.camera_id.push_back(v.camera);
        ds.train.local_label.push_back(v.label);
        ds.train_global_id.push_back(v.identity);
      }
      ds.overlap_truth[static_cast<std::size_t>(v.label)] =
          ClassTruth{prior.count(v.identity) > 0, v.identity};
    }
    ds.train.num_classes = n_classes;
    ds.train.x = Tensor::matrix(ds.train.size(), static_cast<std::size_t>(cfg.d_in), std::move(data));
  };

  auto materialize_test = [&](StepDataset& ds, const std::vector<detail::View>& views) {
    std::vector<double> data;
    for (const auto& v : views) {
      for (int s = 0; s < cfg.test_samples_per_id; ++s) {
        detail::append_rows(data, observe(ids[static_cast<std::size_t>(v.identity)],
                                          cams[static_cast<std::size_t>(v.camera)], observe_rng));
        ds.test.camera_id.push_back(v.camera);
        ds.test.global_id.push_back(v.identity);
      }
    }
    ds.test.x = Tensor::matrix(ds.test.size(), static_cast<std::size_t>(cfg.d_in), std::move(data));
  };

  // Labels are a random re-indexing per camera, laid out in consecutive
  // ranges so that one step's label space stays dense.
  auto label_views = [&](std::vector<detail::View>& views, int first_label) {
    std::vector<std::size_t> order(views.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    select_rng.shuffle(order);
    for (std::size_t r = 0; r < order.size(); ++r)
      views[order[r]].label = first_label + static_cast<int>(r);
  };

  // ---- step 1: several cameras, possibly with shared labels ----------------
  {
    StepDataset ds;
    ds.step = 1;
    for (int c = 0; c < cfg.initial_cameras; ++c) ds.cameras.push_back(new_camera());
    std::vector<int> step_ids;
    for (int i = 0; i < cfg.initial_ids; ++i) step_ids.push_back(fresh_identity());
    std::vector<std::vector<int>> view_cams(step_ids.size());
    for (auto& vc : view_cams) {
      auto pick = select_rng.sample_without_replacement(
          static_cast<std::size_t>(cfg.initial_cameras),
          static_cast<std::size_t>(cfg.initial_views_per_id));
      std::sort(pick.begin(), pick.end());
      for (auto p : pick) vc.push_back(ds.cameras[p]);
    }
    std::vector<detail::View> views;
    if (cfg.step1_global_labels) {
      std::vector<detail::View> per_id;
      for (std::size_t i = 0; i < step_ids.size(); ++i) per_id.push_back({step_ids[i], -1, 0});
      label_views(per_id, 0);
      for (std::size_t i = 0; i < step_ids.size(); ++i)
        for (int c : view_cams[i]) views.push_back({step_ids[i], c, per_id[i].label});
    } else {
      int next = 0;
      for (int c : ds.cameras) {
        std::vector<detail::View> cam_views;
        for (std::size_t i = 0; i < step_ids.size(); ++i)
          if (std::find(view_cams[i].begin(), view_cams[i].end(), c) != view_cams[i].end())
            cam_views.push_back({step_ids[i], c, 0});
        label_views(cam_views, next);
        next += static_cast<int>(cam_views.size());
        views.insert(views.end(), cam_views.begin(), cam_views.end());
      }
    }
    std::sort(views.begin(), views.end(),
              [](const detail::View& a, const detail::View& b) {
                return a.label != b.label ? a.label < b.label : a.camera < b.camera;
              });
    materialize_train(ds, views, {});

    std::vector<detail::View> test_views;
    for (int i = 0; i < cfg.test_initial_ids; ++i) {
      const int id = fresh_identity();
      test_pool.push_back(id);
      auto pick = select_rng.sample_without_replacement(
          static_cast<std::size_t>(cfg.initial_cameras),
          static_cast<std::size_t>(cfg.initial_views_per_id));
      std::sort(pick.begin(), pick.end());
      for (auto p : pick) test_views.push_back({id, ds.cameras[p], 0});
    }
    materialize_test(ds, test_views);
    train_pool = step_ids;
    steps.push_back(std::move(ds));
  }

  // ---- incremental steps ----------------------------------------------------
  for (int t = 2; t <= cfg.num_steps; ++t) {
    StepDataset ds;
    ds.step = t;
    const std::set<int> prior(train_pool.begin(), train_pool.end());
    const double overlap = cfg.overlap_at(t);
    std::vector<detail::View> views, test_views;
    std::vector<int> step_train_ids, step_test_ids;
    int next_label = 0;
    for (int c = 0; c < cfg.cameras_per_step; ++c) {
      const int cam = new_camera();
      ds.cameras.push_back(cam);
      const auto n_seen = static_cast<std::size_t>(std::lround(overlap * cfg.ids_per_camera));
      if (n_seen > 0 && train_pool.empty())
        throw ConfigError("overlap_fraction: overlap requested but no prior identities exist");
      if (n_seen > train_pool.size())
        throw ConfigError("overlap_fraction: more re-appearing identities than exist");
      std::vector<detail::View> cam_views;
      for (auto p : select_rng.sample_without_replacement(train_pool.size(), n_seen))
        cam_views.push_back({train_pool[p], cam, 0});
      for (std::size_t i = n_seen; i < static_cast<std::size_t>(cfg.ids_per_camera); ++i) {
        const int id = fresh_identity();
        step_train_ids.push_back(id);
        cam_views.push_back({id, cam, 0});
      }
      label_views(cam_views, next_label);
      next_label += static_cast<int>(cam_views.size());
      views.insert(views.end(), cam_views.begin(), cam_views.end());

      const auto n_test_seen = std::min(
          test_pool.size(),
          static_cast<std::size_t>(std::lround(cfg.test_overlap * cfg.test_ids_per_camera)));
      for (auto p : select_rng.sample_without_replacement(test_pool.size(), n_test_seen))
        test_views.push_back({test_pool[p], cam, 0});
      for (std::size_t i = n_test_seen; i < static_cast<std::size_t>(cfg.test_ids_per_camera);
           ++i) {
        const int id = fresh_identity();
        step_test_ids.push_back(id);
        test_views.push_back({id, cam, 0});
      }
    }
    std::sort(views.begin(), views.end(), [](const detail::View& a, const detail::View& b) {
      return a.label < b.label;
    });
    materialize_train(ds, views, prior);
    materialize_test(ds, test_views);
    train_pool.insert(train_pool.end(), step_train_ids.begin(), step_train_ids.end());
    test_pool.insert(test_pool.end(), step_test_ids.begin(), step_test_ids.end());
    steps.push_back(std::move(ds));
  }
  return steps;
}

/// A batch of P distinct groups with K members each, given as sample indices.
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<int> groups;  // group id of each entry
  [[nodiscard]] std::size_t size() const noexcept { return indices.size(); }
};

/// PK sampling over arbitrary groups of sample indices. Groups smaller than K
/// contribute every member once and fill the remainder with replacement.
inline Batch pk_sample(const std::vector<std::vector<std::size_t>>& groups, std::size_t P,
                       std::size_t K, Rng& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t g = 0; g < groups.size(); ++g)
    if (!groups[g].empty()) eligible.push_back(g);
  if (P == 0 || K == 0) throw InvalidArgument("pk_sample: P and K must be positive");
  if (P > eligible.size()) throw InvalidArgument("pk_sample: P exceeds the number of classes");
  Batch batch;
  batch.indices.reserve(P * K);
  for (auto pick : rng.sample_without_replacement(eligible.size(), P)) {
    const std::size_t g = eligible[pick];
    const auto& members = groups[g];
    if (members.size() >= K) {
      for (auto m : rng.sample_without_replacement(members.size(), K))
        batch.indices.push_back(members[m]);
    } else {
      for (auto m : members) batch.indices.push_back(m);
      for (std::size_t k = members.size(); k < K; ++k)
        batch.indices.push_back(members[rng.index(members.size())]);
    }
    for (std::size_t k = 0; k < K; ++k) batch.groups.push_back(static_cast<int>(g));
  }
  return batch;
}

inline Batch pk_sample(const TrainSplit& ds, std::size_t P, std::size_t K, Rng& rng) {
  return pk_sample(ds.class_members(), P, K, rng);
}

}  // namespace extendova::stream
