#include "catch_amalgamated.hpp"

#include <cmath>

#include "acmil/training.hpp"
#include "test_util.hpp"

using namespace acmil;

namespace {

ParamSet<double> scalar_param(double value) {
  ModelConfig cfg = testutil::tiny_config();
  ParamSet<double> p;
  p.cfg = cfg;
  p.items.emplace_back("task.w", MatD::Constant(1, 1, value));
  return p;
}

Dataset tiny_dataset(int count, uint64_t seed) {
  return generate_dataset(count, 8, 64, 64, seed);
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.model = testutil::tiny_config(8, 4, 6, 16);
  cfg.n_slices = 2;
  cfg.k_patches = 6;
  cfg.epochs_max = 3;
  cfg.patience = 3;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("optimizer stands still on zero gradients without decay") {
  ParamSet<double> p = scalar_param(1.37);
  auto s = AdamWState<double>::init(p);
  std::vector<MatD> g = {MatD::Zero(1, 1)};
  optimizer_step(p, g, s, 1.0, 0.0);
  REQUIRE(p.items[0].second(0, 0) == 1.37);
}

TEST_CASE("weight decay is decoupled from the adaptive step") {
  ParamSet<double> p = scalar_param(2.0);
  auto s = AdamWState<double>::init(p);
  std::vector<MatD> g = {MatD::Zero(1, 1)};
  optimizer_step(p, g, s, 1.0, 0.1);
  REQUIRE_THAT(p.items[0].second(0, 0), Catch::Matchers::WithinAbs(1.8, 1e-15));
}

TEST_CASE("scalar trajectory matches a hand-stepped reference") {
  const double lr = 0.05, wd = 0.01, grad = 0.3;
  ParamSet<double> p = scalar_param(1.0);
  auto s = AdamWState<double>::init(p);
  std::vector<MatD> g = {MatD::Constant(1, 1, grad)};

  double ref = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    optimizer_step(p, g, s, lr, wd);
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    const double mh = m / (1 - std::pow(0.9, t));
    const double vh = v / (1 - std::pow(0.999, t));
    ref -= lr * mh / (std::sqrt(vh) + 1e-8);
    ref -= lr * wd * ref;
    REQUIRE_THAT(p.items[0].second(0, 0), Catch::Matchers::WithinAbs(ref, 1e-8));
  }
}

TEST_CASE("NaN gradients abort with the parameter group named") {
  ParamSet<double> p = scalar_param(1.0);
  auto s = AdamWState<double>::init(p);
  std::vector<MatD> g = {MatD::Constant(1, 1, std::nan(""))};
  try {
    optimizer_step(p, g, s, 0.1, 0.0);
    FAIL("expected abort");
  } catch (const std::runtime_error& e) {
    REQUIRE(std::string(e.what()).find("task") != std::string::npos);
  }
}

TEST_CASE("stratified folds partition the data with balanced classes") {
  std::vector<int> labels;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 30; ++i) labels.push_back(c);
  Rng shuffler(3);
  shuffler.shuffle(labels.begin(), labels.end());

  auto folds = make_folds(labels, 3, 17);
  REQUIRE(folds.size() == 3);
  std::vector<int> seen(labels.size(), 0);
  for (const auto& f : folds) {
    REQUIRE(f.test.size() == 40);
    std::array<int, 4> per_class{};
    for (int i : f.test) {
      per_class[labels[i]]++;
      seen[i]++;
    }
    for (int c = 0; c < 4; ++c) REQUIRE(per_class[c] == 10);
    REQUIRE(f.train.size() == 72);
    REQUIRE(f.val.size() == 8);
    // train/val/test of one fold are disjoint and cover everything
    std::vector<int> all = f.train;
    all.insert(all.end(), f.val.begin(), f.val.end());
    all.insert(all.end(), f.test.begin(), f.test.end());
    std::sort(all.begin(), all.end());
    REQUIRE(all.size() == labels.size());
    REQUIRE(std::adjacent_find(all.begin(), all.end()) == all.end());
  }
  for (int s : seen) REQUIRE(s == 1);  // test folds partition the dataset

  auto again = make_folds(labels, 3, 17);
  for (int f = 0; f < 3; ++f) {
    REQUIRE(folds[f].train == again[f].train);
    REQUIRE(folds[f].val == again[f].val);
    REQUIRE(folds[f].test == again[f].test);
  }
}

TEST_CASE("folds reject classes with fewer than k samples") {
  std::vector<int> labels = {0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3};
  REQUIRE_THROWS_AS(make_folds(labels, 3, 1), ValidationError);
}

TEST_CASE("patience counts evaluated epochs without improvement") {
  Dataset ds = tiny_dataset(8, 21);
  FoldIndices fold;
  fold.index = 0;
  fold.train = {0, 1, 2, 3, 4, 5};
  fold.val = {6, 7};

  TrainConfig cfg = tiny_train_config();
  cfg.lr = 1e-30;  // no measurable movement, so no improvement after epoch 1
  cfg.patience = 1;
  cfg.epochs_max = 10;
  TrainResult r = train_fold(ds, fold, cfg);
  REQUIRE(r.history.rows.size() == 2);
  REQUIRE(r.history.best_epoch == 1);
}

TEST_CASE("disabled components contribute neither loss nor gradients") {
  Dataset ds = tiny_dataset(8, 22);
  FoldIndices fold;
  fold.index = 0;
  fold.train = {0, 1, 2, 3};
  fold.val = {4, 5};

  TrainConfig cfg = tiny_train_config();
  cfg.ablation.cbm = cfg.ablation.sad = cfg.ablation.adv = false;
  TrainResult r = train_fold(ds, fold, cfg);
  for (const auto& row : r.history.rows) {
    REQUIRE(row.cbm == 0.0);
    REQUIRE(row.adv == 0.0);
    REQUIRE(row.sad == 0.0);
    REQUIRE(row.total == row.task);
  }

  // gradient isolation at the step level
  Rng rng(23);
  ParamSet<float> params = ParamSet<float>::init(cfg.model, rng);
  SubBag bag = sample_subbag(ds.volumes[0], 2, 4, cfg.model.patch, rng);
  Tape<float> tape;
  ForwardOptions<float> opts;
  opts.build_adversary = false;
  auto g = forward_subbag(tape, params, bag, opts);
  auto lg = total_loss_op(tape, g, bag.y_vol, bag.grades, cfg.weights,
                          cfg.ablation, cfg.model.num_classes);
  tape.backward(lg.total);
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.items[i].first;
    if (name.starts_with("adv.") || name.starts_with("head.") ||
        name.starts_with("proj.sh") || name.starts_with("attn1.sh")) {
      MatF grad = tape.grad_or_zero(g.leaves[i]);
      REQUIRE(grad.cwiseAbs().maxCoeff() == 0.f);
    }
  }
}

TEST_CASE("training is deterministic for a fixed config and seed") {
  Dataset ds = tiny_dataset(12, 24);
  auto folds = make_folds(ds.labels(), 3, 7, 0.34);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs_max = 2;

  TrainResult a = train_fold(ds, folds[1], cfg);
  TrainResult b = train_fold(ds, folds[1], cfg);
  REQUIRE(a.history.rows.size() == b.history.rows.size());
  for (size_t i = 0; i < a.history.rows.size(); ++i) {
    REQUIRE(a.history.rows[i].total == b.history.rows[i].total);
    REQUIRE(a.history.rows[i].val_qwk == b.history.rows[i].val_qwk);
    REQUIRE(a.history.rows[i].val_amae == b.history.rows[i].val_amae);
  }
  for (size_t i = 0; i < a.best_params.size(); ++i)
    REQUIRE(a.best_params.items[i].second == b.best_params.items[i].second);
}

TEST_CASE("the kept checkpoint reproduces the best recorded validation QWK") {
  Dataset ds = tiny_dataset(12, 25);
  auto folds = make_folds(ds.labels(), 3, 8, 0.34);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs_max = 4;
  cfg.patience = 4;
  cfg.lr = 3e-3;

  TrainResult r = train_fold(ds, folds[0], cfg);
  double best = -2;
  for (const auto& row : r.history.rows) best = std::max(best, row.val_qwk);
  REQUIRE_THAT(r.history.best_val_qwk, Catch::Matchers::WithinAbs(best, 1e-12));

  std::vector<int> vt;
  for (int i : folds[0].val) vt.push_back(ds.volumes[i].y_vol);
  std::vector<int> vp = predict_ranks(r.best_params, ds, folds[0].val);
  REQUIRE_THAT(qwk(vt, vp), Catch::Matchers::WithinAbs(best, 1e-12));
}

TEST_CASE("ablation strings parse and reject junk") {
  AblationFlags f = parse_ablation("cbm,adv");
  REQUIRE(f.cbm);
  REQUIRE(f.adv);
  REQUIRE_FALSE(f.sad);
  AblationFlags none = parse_ablation("");
  REQUIRE_FALSE(none.cbm);
  REQUIRE_FALSE(none.sad);
  REQUIRE_FALSE(none.adv);
  REQUIRE(parse_ablation("cbm,sad,adv").sad);
  REQUIRE_THROWS_AS(parse_ablation("cbm,bogus"), ValidationError);
}

TEST_CASE("history csv has one row per epoch plus a header") {
  TrainHistory h;
  h.rows.push_back({1, 0.5, 0.1, 0.2, 0.3, 1.1, 0.4, 0.9});
  h.rows.push_back({2, 0.4, 0.1, 0.2, 0.2, 0.9, 0.6, 0.7});
  h.best_epoch = 2;
  std::string csv = history_csv(h);
  REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
  REQUIRE(csv.starts_with("epoch,task,cbm,adv,sad,total,val_qwk,val_amae"));
  REQUIRE(csv.find("\n2,") != std::string::npos);
}
