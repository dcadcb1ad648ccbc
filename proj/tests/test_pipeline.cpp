#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "extendova/eval.hpp"
#include "extendova/pipeline.hpp"
#include "extendova/synthstream.hpp"
#include "oracles.hpp"

using namespace extendova;
using namespace extendova::pipeline;
using num::Tensor;

namespace {

stream::StreamConfig small_stream(std::uint64_t seed = 3) {
  stream::StreamConfig c;
  c.initial_cameras = 2;
  c.initial_ids = 24;
  c.ids_per_camera = 16;
  c.samples_per_id = 6;
  c.test_initial_ids = 8;
  c.test_ids_per_camera = 8;
  c.test_samples_per_id = 3;
  c.d_in = 16;
  c.d_latent = 8;
  c.seed = seed;
  return c;
}

StepPlan small_plan(Method m = Method::extendova) {
  StepPlan p;
  p.method = m;
  p.epochs = 6;
  p.early_reg_epochs = 2;
  p.P = 8;
  p.K = 4;
  p.lr = 3e-3;
  p.ova_epochs = 5;
  return p;
}

model::EncoderShape small_shape() { return {16, 24, 12}; }

struct Fixture {
  std::vector<stream::StepDataset> steps;
  LearnerState s1;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.steps = stream::generate_stream(small_stream());
    x.s1 = train_initial_step(x.steps[0].train, small_plan(), small_shape(), num::Rng(11));
    return x;
  }();
  return f;
}

void reject_all(OvaDetector& det) {
  det.weights().fill(0.0);
  for (std::size_t k = 0; k < det.size(); ++k) {
    det.bias()[2 * k] = -50.0;
    det.bias()[2 * k + 1] = 50.0;
  }
}

bool same_tensor(const Tensor& a, const Tensor& b) { return a.shape() == b.shape() && a.data() == b.data(); }

bool same_state(const LearnerState& a, const LearnerState& b) {
  return same_tensor(a.models.online.w1, b.models.online.w1) && same_tensor(a.models.ema.w2, b.models.ema.w2) &&
         same_tensor(a.bank.prototypes(), b.bank.prototypes()) && same_tensor(a.detector.weights(), b.detector.weights()) &&
         same_tensor(a.classifier.phi, b.classifier.phi);
}

}  // namespace

// ---------------------------------------------------------------------------
// Selection criterion

TEST_CASE("criterion: unanimous all-seen class takes the elected old class") {
  const std::vector<int> labels{0, 0, 0};
  const std::vector<std::size_t> votes{7, 7, 7};
  const auto d = apply_criterion(labels, 1, {true, true, true}, votes);
  CHECK(d[0].seen);
  CHECK(d[0].elected == 7);
  CHECK(d[0].support == 3);
}

TEST_CASE("criterion: a single unseen flag makes the class unseen") {
  const std::vector<int> labels{0, 0, 0, 0};
  const std::vector<std::size_t> votes{7, 7, 7, 7};
  const auto d = apply_criterion(labels, 1, {true, true, false, true}, votes);
  CHECK_FALSE(d[0].seen);
  CHECK(d[0].flagged == 3);
}

TEST_CASE("criterion: majority vote and lowest-id tie break") {
  const std::vector<int> labels{0, 0, 0, 0, 1, 1};
  const std::vector<std::size_t> votes{7, 2, 7, 7, 5, 3};
  const auto d = apply_criterion(labels, 2, std::vector<bool>(6, true), votes);
  CHECK(d[0].elected == 7);
  CHECK(d[1].elected == 3);
}

TEST_CASE("criterion: duplicate election keeps the larger support") {
  const std::vector<int> labels{0, 0, 1, 1, 1, 2, 2};
  const std::vector<std::size_t> votes{4, 4, 4, 4, 4, 4, 4};
  auto d = apply_criterion(labels, 3, std::vector<bool>(7, true), votes);
  CHECK_FALSE(d[0].seen);
  CHECK(d[1].seen);
  CHECK_FALSE(d[2].seen);

  const std::vector<int> tie{0, 0, 1, 1};
  d = apply_criterion(tie, 2, std::vector<bool>(4, true), std::vector<std::size_t>{4, 4, 4, 4});
  CHECK(d[0].seen);
  CHECK_FALSE(d[1].seen);
}

TEST_CASE("criterion: input validation") {
  const std::vector<int> labels{0, 1};
  CHECK_THROWS_AS(apply_criterion(labels, 2, {true}, std::vector<std::size_t>{0, 0}), InvalidArgument);
  CHECK_THROWS_AS(apply_criterion(labels, 1, {true, true}, std::vector<std::size_t>{0, 0}), InvalidArgument);
}

TEST_CASE("generate_pseudo_labels matches a counting oracle on random tables") {
  num::Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const int C = 2 + static_cast<int>(rng.index(8));
    const std::size_t n_old = 3 + rng.index(6);
    stream::TrainSplit train;
    train.num_classes = C;
    Identification id;
    for (int y = 0; y < C; ++y) {
      const std::size_t m = 1 + rng.index(5);
      for (std::size_t s = 0; s < m; ++s) {
        train.local_label.push_back(y);
        train.camera_id.push_back(9);
        id.flags.push_back(rng.uniform() < 0.8);
        id.votes.push_back(rng.index(n_old));
      }
    }
    const std::size_t n = train.local_label.size();
    id.scores.assign(n, 0.5);
    id.features = num::normalize_rows(rng.normal_tensor({n, 4}, 1.0));
    train.x = Tensor::matrix(n, 4);
    model::MemoryBank bank(4);
    bank.extend(num::normalize_rows(rng.normal_tensor({n_old, 4}, 1.0)), 1, model::Origin::initial);

    const auto st = generate_pseudo_labels(train, id, bank, 2);

    const auto o = oracle::criterion_counting(train.local_label, C, id.flags, id.votes, n_old);
    for (int y = 0; y < C; ++y) {
      INFO("trial " << trial << " class " << y);
      REQUIRE(st.classes[y].seen == o.seen[y]);
      CHECK(st.classes[y].label == o.label[y]);
    }
    CHECK(bank.size() == o.bank_size);
    CHECK(st.created.size() == o.bank_size - n_old);
  }
}

TEST_CASE("generate_pseudo_labels initializes new prototypes at class means") {
  stream::TrainSplit train;
  train.num_classes = 1;
  train.local_label = {0, 0};
  train.camera_id = {5, 5};
  train.x = Tensor::matrix(2, 2);
  Identification id;
  id.features = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  id.flags = {false, false};
  id.votes = {0, 0};
  id.scores = {0.1, 0.1};
  model::MemoryBank bank(2);
  bank.extend(Tensor::matrix(1, 2, {1.0, 0.0}), 1, model::Origin::initial);
  const auto st = generate_pseudo_labels(train, id, bank, 2);
  REQUIRE(bank.size() == 2);
  CHECK(bank.prototype(1)[0] == Catch::Approx(std::sqrt(0.5)));
  CHECK(bank.prototype(1)[1] == Catch::Approx(std::sqrt(0.5)));
  CHECK(st.classes[0].label == 1);
}

// ---------------------------------------------------------------------------
// Refinement bookkeeping

namespace {

struct RefineCase {
  stream::TrainSplit train;
  model::MemoryBank bank{2};
  PseudoLabelState state;
};

// Two local classes, both created unseen at step 2 on top of two old classes.
RefineCase refine_case() {
  RefineCase c;
  c.train.num_classes = 2;
  c.train.local_label = {0, 0, 1, 1, 1};
  c.train.camera_id = std::vector<int>(5, 5);
  c.train.x = Tensor::matrix(5, 2);
  c.bank.extend(Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0}), 1, model::Origin::initial);
  Identification id;
  id.features = Tensor::matrix(5, 2, {1, 0, 1, 0, 0, 1, 0, 1, 0, 1});
  id.flags = std::vector<bool>(5, false);
  id.votes = {0, 0, 1, 1, 1};
  id.scores = std::vector<double>(5, 0.1);
  c.state = generate_pseudo_labels(c.train, id, c.bank, 2);
  return c;
}

Identification flags_for(std::vector<bool> flags, std::vector<std::size_t> votes) {
  Identification id;
  id.features = Tensor::matrix(flags.size(), 2);
  id.scores = std::vector<double>(flags.size(), 0.9);
  id.flags = std::move(flags);
  id.votes = std::move(votes);
  return id;
}

}  // namespace

TEST_CASE("refinement without flips leaves the state unchanged") {
  auto c = refine_case();
  const auto protos = c.bank.prototypes();
  const auto out = refine_pseudo_labels(c.train, c.state,
                                        flags_for({false, true, true, true, false}, {0, 0, 1, 1, 1}), c.bank);
  CHECK(out.flips == 0);
  CHECK(out.removed.empty());
  CHECK(c.bank.active_ids(0, c.bank.size()).size() == 4);
  CHECK(c.bank.prototypes().data() == protos.data());
  for (std::size_t y = 0; y < 2; ++y) CHECK(out.classes[y].label == c.state.classes[y].label);
}

TEST_CASE("refinement flip removes exactly one prototype") {
  auto c = refine_case();
  const std::size_t created_for_1 = c.state.classes[1].label;
  const auto out = refine_pseudo_labels(c.train, c.state,
                                        flags_for({false, true, true, true, true}, {0, 0, 1, 1, 1}), c.bank);
  CHECK(out.flips == 1);
  REQUIRE(out.removed.size() == 1);
  CHECK(out.removed[0] == created_for_1);
  CHECK(out.classes[1].seen);
  CHECK(out.classes[1].label == 1);
  CHECK_FALSE(c.bank.active(created_for_1));
  CHECK(c.bank.active(c.state.classes[0].label));
}

TEST_CASE("refinement gives a contested old class to the larger support") {
  auto c = refine_case();
  const auto out = refine_pseudo_labels(c.train, c.state,
                                        flags_for({true, true, true, true, true}, {1, 1, 1, 1, 1}), c.bank);
  CHECK(out.flips == 1);
  CHECK(out.classes[1].seen);
  CHECK_FALSE(out.classes[0].seen);
}

// ---------------------------------------------------------------------------
// Surrogates

TEST_CASE("surrogates: zero variance reproduces prototypes exactly") {
  num::Rng rng(5);
  model::Encoder old = model::Encoder::create({4, 6, 3}, rng);
  old.running_var.fill(0.0);
  old.running_norm = 2.5;
  model::MemoryBank bank(3);
  bank.extend(num::normalize_rows(rng.normal_tensor({4, 3}, 1.0)), 1, model::Origin::initial);
  const auto sur = sample_surrogates(bank, 4, old, 64, rng);
  for (std::size_t b = 0; b < 64; ++b) {
    const auto w = bank.prototype(sur.classes[b]);
    for (std::size_t j = 0; j < 3; ++j) CHECK(sur.features.at(b, j) == Catch::Approx(w[j]).epsilon(1e-15));
  }
}

TEST_CASE("surrogates: unit norm, mean direction, valid source ids") {
  num::Rng rng(6);
  model::Encoder old = model::Encoder::create({4, 6, 8}, rng);
  old.running_var.fill(1.0);
  old.running_norm = 4.0;
  model::MemoryBank bank(8);
  bank.extend(num::normalize_rows(rng.normal_tensor({3, 8}, 1.0)), 1, model::Origin::initial);
  bank.extend(num::normalize_rows(rng.normal_tensor({2, 8}, 1.0)), 2);
  const auto sur = sample_surrogates(bank, 3, old, 10000, rng);
  std::vector<std::vector<double>> sum(3, std::vector<double>(8, 0.0));
  for (std::size_t b = 0; b < 10000; ++b) {
    CHECK(sur.classes[b] < 3);
    CHECK(num::norm(sur.features.row(b)) == Catch::Approx(1.0).epsilon(1e-12));
    for (std::size_t j = 0; j < 8; ++j) sum[sur.classes[b]][j] += sur.features.at(b, j);
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const double cos = num::dot(sum[k], bank.prototype(k)) / num::norm(sum[k]);
    CHECK(cos >= 0.9);
  }
}

TEST_CASE("surrogates: errors") {
  num::Rng rng(7);
  model::Encoder old = model::Encoder::create({4, 6, 3}, rng);
  model::MemoryBank empty(3);
  CHECK_THROWS_AS(sample_surrogates(empty, 0, old, 4, rng), StateError);
  model::MemoryBank bank(3);
  bank.extend(num::normalize_rows(rng.normal_tensor({2, 3}, 1.0)), 1, model::Origin::initial);
  CHECK_THROWS_AS(sample_surrogates(bank, 2, old, 0, rng), InvalidArgument);
  const auto a = sample_surrogates(bank, 2, old, 5, *std::make_unique<num::Rng>(9));
  const auto b = sample_surrogates(bank, 2, old, 5, *std::make_unique<num::Rng>(9));
  CHECK(a.features.data() == b.features.data());
}

// ---------------------------------------------------------------------------
// Initial step and identification

TEST_CASE("initial step: default stream train accuracy") {
  stream::StreamConfig c;
  c.num_steps = 2;
  c.overlap_fraction = {0.45};
  const auto steps = stream::generate_stream(c);
  const auto& train = steps[0].train;
  const auto st = train_initial_step(train, StepPlan{}, {64, 64, 32}, num::Rng(0));
  const Tensor feats = model::embed(st.models.ema, train.x);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (st.bank.nearest(feats.row(i)).first == static_cast<std::size_t>(train.local_label[i])) ++ok;
  CHECK(static_cast<double>(ok) / static_cast<double>(train.size()) >= 0.95);
}

TEST_CASE("initial step: heads trained, classifier sized") {
  const auto& f = fixture();
  REQUIRE(f.s1.detector.size() == f.s1.bank.size());
  for (std::size_t k = 0; k < f.s1.detector.size(); ++k) {
    CHECK(f.s1.detector.trained(k));
    CHECK(f.s1.detector.frozen(k));
  }
  CHECK(f.s1.classifier.classes() == f.s1.bank.size());
}

TEST_CASE("initial step: degenerate stream without domain gaps is separable") {
  auto c = small_stream(8);
  c.domain_shift = 0.0;
  c.noise_std = 0.0;
  c.offset_std = 0.0;
  const auto steps = stream::generate_stream(c);
  const auto st = train_initial_step(steps[0].train, small_plan(), small_shape(), num::Rng(1));
  CHECK(eval::evaluate_retrieval(st.models.ema, steps[0].test).mAP >= 0.99);
}

TEST_CASE("initial step: config errors") {
  const auto& f = fixture();
  stream::TrainSplit one = f.steps[0].train;
  one.num_classes = 1;
  CHECK_THROWS_AS(train_initial_step(one, small_plan(), small_shape(), num::Rng(1)), ConfigError);
  CHECK_THROWS_AS(train_initial_step(f.steps[0].train, small_plan(), {15, 24, 12}, num::Rng(1)), ConfigError);
}

TEST_CASE("identification: old training samples are flagged seen") {
  const auto& f = fixture();
  const auto id = identify_seen_samples(f.steps[0].train, f.s1.models.ema, f.s1.bank, f.s1.detector,
                                        f.s1.bank.size(), 0.5);
  const auto seen = std::count(id.flags.begin(), id.flags.end(), true);
  CHECK(static_cast<double>(seen) / static_cast<double>(id.flags.size()) >= 0.9);
}

TEST_CASE("identification: reject-all detector and determinism") {
  const auto& f = fixture();
  OvaDetector det = f.s1.detector;
  const auto& train = f.steps[1].train;
  const auto a = identify_seen_samples(train, f.s1.models.ema, f.s1.bank, det, f.s1.bank.size(), 0.5);
  const auto b = identify_seen_samples(train, f.s1.models.ema, f.s1.bank, det, f.s1.bank.size(), 0.5);
  CHECK(a.flags == b.flags);
  CHECK(a.votes == b.votes);
  CHECK(a.scores == b.scores);
  reject_all(det);
  const auto r = identify_seen_samples(train, f.s1.models.ema, f.s1.bank, det, f.s1.bank.size(), 0.5);
  CHECK(std::none_of(r.flags.begin(), r.flags.end(), [](bool x) { return x; }));
}

// ---------------------------------------------------------------------------
// Incremental step

TEST_CASE("incremental step: smoke, finite traces, bookkeeping invariant") {
  const auto& f = fixture();
  const auto& train = f.steps[1].train;
  StepReport rep;
  const auto st = run_incremental_step(train, f.s1, 2, small_plan(), num::Rng(21), {}, &rep);
  REQUIRE(rep.trace.size() == 6);
  for (const auto& tr : rep.trace) CHECK(std::isfinite(tr.total));
  REQUIRE(rep.final_labels);
  std::set<std::size_t> active_extended, unseen;
  for (std::size_t k : st.bank.active_ids(f.s1.bank.size(), st.bank.size())) active_extended.insert(k);
  for (std::size_t y : rep.final_labels->unseen_classes()) unseen.insert(rep.final_labels->classes[y].label);
  CHECK(active_extended == unseen);
  CHECK(st.bank.size() >= f.s1.bank.size());
  CHECK(st.detector.size() == st.bank.size());
  for (std::size_t k : active_extended) CHECK(st.detector.trained(k));
  CHECK(rep.sample_labels == rep.final_labels->sample_labels(train));
}

TEST_CASE("incremental step: old prototypes fixed during early regularization") {
  const auto& f = fixture();
  const std::size_t old = f.s1.bank.size();
  StepPlan plan = small_plan();
  std::vector<Tensor> snapshots;
  Hooks hooks;
  hooks.on_epoch = [&](const EpochEvent& ev) {
    if (ev.epoch <= plan.early_reg_epochs) {
      std::vector<std::size_t> ids(old);
      for (std::size_t k = 0; k < old; ++k) ids[k] = k;
      snapshots.push_back(ev.state.bank.prototypes().select_rows(ids));
    }
  };
  run_incremental_step(f.steps[1].train, f.s1, 2, plan, num::Rng(21), hooks);
  REQUIRE(snapshots.size() == 2);
  std::vector<std::size_t> ids(old);
  for (std::size_t k = 0; k < old; ++k) ids[k] = k;
  const Tensor before = f.s1.bank.prototypes().select_rows(ids);
  for (const auto& s : snapshots) CHECK(s.data() == before.data());
}

TEST_CASE("incremental step: zero aux weight equals disabled aux") {
  const auto& f = fixture();
  StepPlan a = small_plan(), b = small_plan();
  a.weights.lambda_aux = 0.0;
  b.use_aux = false;
  const auto sa = run_incremental_step(f.steps[1].train, f.s1, 2, a, num::Rng(4));
  const auto sb = run_incremental_step(f.steps[1].train, f.s1, 2, b, num::Rng(4));
  CHECK(same_state(sa, sb));
}

TEST_CASE("incremental step: training never reads global identities") {
  const auto& f = fixture();
  auto poisoned = f.steps[1];
  for (auto& g : poisoned.train_global_id) g = -7;
  for (auto& t : poisoned.overlap_truth) t = {!t.seen, -9};
  for (auto& g : poisoned.test.global_id) g = 0;
  StepReport ra, rb;
  const auto a = run_incremental_step(f.steps[1].train, f.s1, 2, small_plan(), num::Rng(31), {}, &ra);
  const auto b = run_incremental_step(poisoned.train, f.s1, 2, small_plan(), num::Rng(31), {}, &rb);
  CHECK(same_state(a, b));
  REQUIRE(ra.trace.size() == rb.trace.size());
  for (std::size_t e = 0; e < ra.trace.size(); ++e) CHECK(ra.trace[e].total == rb.trace[e].total);
  CHECK(ra.sample_labels == rb.sample_labels);
}

TEST_CASE("incremental step: disjoint stream with reject-all detector matches fine-tune labels") {
  auto c = small_stream(12);
  c.overlap_fraction = {0.0, 0.0};
  const auto steps = stream::generate_stream(c);
  LearnerState s1 = train_initial_step(steps[0].train, small_plan(), small_shape(), num::Rng(2));
  reject_all(s1.detector);
  StepReport ours, ft;
  run_incremental_step(steps[1].train, s1, 2, small_plan(), num::Rng(3), {}, &ours);
  run_baseline_step(steps[1].train, s1, 2, small_plan(Method::finetune), num::Rng(3), {}, &ft);
  CHECK(ours.sample_labels == ft.sample_labels);
  CHECK(ours.final_labels->flips == 0);
}

TEST_CASE("incremental step: argument validation") {
  const auto& f = fixture();
  CHECK_THROWS_AS(run_incremental_step(f.steps[1].train, f.s1, 1, small_plan(), num::Rng(1)), InvalidArgument);
  StepPlan bad = small_plan();
  bad.lr = -1.0;
  CHECK_THROWS_AS(run_incremental_step(f.steps[1].train, f.s1, 2, bad, num::Rng(1)), ConfigError);
}

// ---------------------------------------------------------------------------
// Baseline family

TEST_CASE("baseline assignment matches a direct scan oracle") {
  const auto& f = fixture();
  const auto& train = f.steps[1].train;
  for (double T : {0.0, 0.3, 0.5, 1.0}) {
    const auto a = baseline_assign(train, f.s1.models.ema, f.s1.classifier, T);
    const Tensor feats = model::embed(f.s1.models.ema, train.x);
    const std::size_t n_old = f.s1.classifier.classes();
    std::map<int, std::size_t> fresh;
    std::set<int> any_unseen;
    std::vector<bool> seen(train.size());
    std::vector<std::size_t> argmax(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      std::vector<double> z(n_old);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n_old; ++k) {
        for (std::size_t j = 0; j < feats.cols(); ++j) z[k] += feats.at(i, j) * f.s1.classifier.phi.at(j, k);
        mx = std::max(mx, z[k]);
      }
      double s = 0.0;
      for (double v : z) s += std::exp(v - mx);
      std::size_t best = 0;
      for (std::size_t k = 1; k < n_old; ++k)
        if (z[k] > z[best]) best = k;
      const double p = 1.0 / s;
      CHECK(a.max_softmax[i] == Catch::Approx(p).epsilon(1e-12));
      seen[i] = p > T;
      argmax[i] = best;
      if (!seen[i]) any_unseen.insert(train.local_label[i]);
    }
    for (int y : any_unseen) fresh.emplace(y, n_old + fresh.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      CHECK(a.seen[i] == seen[i]);
      CHECK(a.labels[i] == (seen[i] ? argmax[i] : fresh.at(train.local_label[i])));
    }
    CHECK(a.new_classes == fresh.size());
    if (T == 1.0) CHECK(a.new_classes == static_cast<std::size_t>(train.num_classes));
    if (T == 0.0) CHECK(a.new_classes == 0);
  }
}

TEST_CASE("baseline, lwf and finetune steps train a growing classifier") {
  const auto& f = fixture();
  const auto& train = f.steps[1].train;
  const std::size_t n_old = f.s1.classifier.classes();
  for (Method m : {Method::baseline, Method::lwf, Method::finetune}) {
    StepReport rep;
    const auto st = run_baseline_step(train, f.s1, 2, small_plan(m), num::Rng(41), {}, &rep);
    CHECK(rep.trace.size() == 6);
    for (const auto& tr : rep.trace) CHECK(std::isfinite(tr.total));
    std::set<std::size_t> fresh;
    for (std::size_t l : rep.sample_labels)
      if (l >= n_old) fresh.insert(l);
    CHECK(st.classifier.classes() == n_old + fresh.size());
    if (m != Method::baseline) {
      CHECK(fresh.size() == static_cast<std::size_t>(train.num_classes));
      for (std::size_t i = 0; i < train.size(); ++i)
        CHECK(rep.sample_labels[i] == n_old + static_cast<std::size_t>(train.local_label[i]));
    }
    if (m == Method::finetune) CHECK(same_tensor(st.models.online.w1, st.models.ema.w1));
    if (m == Method::finetune) CHECK(rep.trace.back().kd == 0.0);
  }
}

TEST_CASE("joint step extends the bank with every new identity") {
  const auto& f = fixture();
  stream::TrainSplit all = f.steps[0].train;
  std::vector<std::size_t> labels(all.local_label.begin(), all.local_label.end());
  std::map<int, std::size_t> dense;
  for (std::size_t i = 0; i < all.size(); ++i) dense.emplace(f.steps[0].train_global_id[i], labels[i]);
  const auto& s2 = f.steps[1];
  std::size_t next = f.s1.bank.size();
  std::vector<double> data(all.x.data());
  for (std::size_t i = 0; i < s2.train.size(); ++i) {
    auto it = dense.find(s2.train_global_id[i]);
    if (it == dense.end()) it = dense.emplace(s2.train_global_id[i], next++).first;
    labels.push_back(it->second);
    all.local_label.push_back(static_cast<int>(it->second));
    all.camera_id.push_back(s2.train.camera_id[i]);
    auto r = s2.train.x.row(i);
    data.insert(data.end(), r.begin(), r.end());
  }
  all.x = Tensor::matrix(labels.size(), all.x.cols(), std::move(data));
  all.num_classes = static_cast<int>(next);
  const auto st = run_joint_step(all, labels, f.s1, 2, small_plan(Method::joint), num::Rng(5));
  CHECK(st.bank.size() == next);
  CHECK(st.bank.active_ids(0, st.bank.size()).size() == next);
}

TEST_CASE("method names round trip") {
  for (Method m : {Method::extendova, Method::baseline, Method::finetune, Method::lwf, Method::joint})
    CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(method_from_string("nope"), ConfigError);
}
