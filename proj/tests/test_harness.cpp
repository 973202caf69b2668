#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <filesystem>
#include <set>

#include "metr/json_io.hpp"
#include "metr/metrics.hpp"
#include "metr/scene.hpp"
#include "metr/trainer.hpp"
#include "oracles.hpp"
#include "param_walk.hpp"

using namespace metr;

namespace {

BenchConfig tiny_config() {
  BenchConfig cfg;
  cfg.seed = 7;
  cfg.n_datasets = 2;
  cfg.classes_per_dataset = 3;
  cfg.alias_fraction = 0.34;  // one alias pair
  cfg.images_per_dataset = 12;
  cfg.grid = 4;
  cfg.d = 8;
  cfg.top_k = 3;
  cfg.n_per_class = 2;
  cfg.epochs = 2;
  cfg.lr = 0.02;
  return cfg;
}

}  // namespace

TEST_CASE("generate_datasets basic structure") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  CHECK(data.space.size() == 6);
  CHECK(data.datasets.size() == 2);
  CHECK(data.alias_pairs.size() == 1);
  CHECK(static_cast<int>(data.scenes.size()) == 2 * cfg.images_per_dataset);
  for (const auto& scene : data.scenes) {
    CHECK(scene.objects.size() >= 1);
    CHECK(static_cast<int>(scene.objects.size()) <= cfg.top_k);
    const auto& desc = data.datasets[scene.dataset_id];
    const std::set<int> taxonomy(desc.local_to_global.begin(), desc.local_to_global.end());
    for (const auto& obj : scene.objects) {
      CHECK(taxonomy.count(obj.category_id) == 1);
      CHECK(obj.box.valid());
    }
    CHECK(static_cast<int>(scene.gt_classes().size()) <= cfg.top_k);
  }
}

TEST_CASE("generate_datasets embedding geometry") {
  BenchConfig cfg;
  cfg.seed = 11;
  cfg.alias_fraction = 0.25;  // 2 alias pairs at 8 classes
  const GeneratedData data = generate_datasets(cfg);
  REQUIRE(data.alias_pairs.size() == 2);
  const Mat& rows = data.table.rows;
  auto row_vec = [&](int gid) {
    Vec v(data.table.d);
    for (int j = 0; j < data.table.d; ++j) v[j] = rows(gid, j);
    return v;
  };
  std::set<std::pair<int, int>> alias_set;
  for (const auto& [a, b] : data.alias_pairs) {
    CHECK(cosine(row_vec(a), row_vec(b)) >= 0.95);
    alias_set.insert({a, b});
    alias_set.insert({b, a});
  }
  // non-alias pairs are nearly orthogonal after decorrelation
  int below = 0, total = 0;
  for (int a = 0; a < data.table.k; ++a) {
    for (int b = a + 1; b < data.table.k; ++b) {
      if (alias_set.count({a, b})) continue;
      ++total;
      if (std::fabs(cosine(row_vec(a), row_vec(b))) < 0.5) ++below;
    }
  }
  CHECK(below == total);  // measured: exceeds the 0.99 requirement
  // unit rows
  for (int a = 0; a < data.table.k; ++a) CHECK(norm2(row_vec(a)) == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("alias_fraction zero produces no forced pairs and distinct names") {
  BenchConfig cfg = tiny_config();
  cfg.alias_fraction = 0.0;
  const GeneratedData data = generate_datasets(cfg);
  CHECK(data.alias_pairs.empty());
  std::set<std::string> names;
  for (const auto& e : data.space.entries()) names.insert(e.name);
  CHECK(static_cast<int>(names.size()) == data.space.size());
}

TEST_CASE("scene generation is deterministic per seed") {
  BenchConfig cfg = tiny_config();
  const GeneratedData a = generate_datasets(cfg);
  const GeneratedData b = generate_datasets(cfg);
  REQUIRE(a.scenes.size() == b.scenes.size());
  for (size_t i = 0; i < a.scenes.size(); ++i) {
    CHECK(a.scenes[i].dataset_id == b.scenes[i].dataset_id);
    REQUIRE(a.scenes[i].objects.size() == b.scenes[i].objects.size());
    for (size_t o = 0; o < a.scenes[i].objects.size(); ++o) {
      CHECK(a.scenes[i].objects[o].category_id == b.scenes[i].objects[o].category_id);
      CHECK(a.scenes[i].objects[o].box == b.scenes[i].objects[o].box);
    }
  }
  CHECK(a.table.rows.a == b.table.rows.a);
}

TEST_CASE("synthesize_features composition") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  const int d = cfg.d;

  SECTION("empty scene is positional encoding plus noise") {
    Scene empty;
    empty.id = 3;
    empty.grid_h = empty.grid_w = 4;
    const Features f = synthesize_features(empty, data.table, cfg.seed);
    // reconstruct: subtract the noise stream, the rest must be the encoding
    Rng noise(mix_seed(mix_seed(cfg.seed, "features"), 3ULL));
    std::vector<double> pe(d);
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) {
        positional_encoding((c + 0.5) / 4, (r + 0.5) / 4, d, pe.data());
        for (int j = 0; j < d; ++j) {
          const double n = noise.normal(0.0, 0.05);
          CHECK(f.f(r * 4 + c, j) == Catch::Approx(pe[j] + n).margin(1e-12));
        }
      }
    }
  }
  SECTION("full-image object reaches every cell") {
    Scene s;
    s.id = 5;
    s.grid_h = s.grid_w = 4;
    s.objects.push_back({2, {0.5, 0.5, 1.0, 1.0}});
    Scene empty = s;
    empty.objects.clear();
    const Features with_obj = synthesize_features(s, data.table, cfg.seed);
    const Features without = synthesize_features(empty, data.table, cfg.seed);
    for (int cell = 0; cell < 16; ++cell)
      for (int j = 0; j < d; ++j)
        CHECK(with_obj.f(cell, j) - without.f(cell, j) == Catch::Approx(data.table.rows(2, j)).margin(1e-12));
  }
  SECTION("two-object scene decomposes additively") {
    Scene ab, a, b, empty;
    for (Scene* s : {&ab, &a, &b, &empty}) {
      s->id = 9;
      s->grid_h = s->grid_w = 4;
    }
    const SceneObject o1{0, {0.3, 0.3, 0.4, 0.4}};
    const SceneObject o2{4, {0.7, 0.7, 0.3, 0.3}};
    ab.objects = {o1, o2};
    a.objects = {o1};
    b.objects = {o2};
    const Features f_ab = synthesize_features(ab, data.table, cfg.seed);
    const Features f_a = synthesize_features(a, data.table, cfg.seed);
    const Features f_b = synthesize_features(b, data.table, cfg.seed);
    const Features f_e = synthesize_features(empty, data.table, cfg.seed);
    for (size_t i = 0; i < f_ab.f.a.size(); ++i) {
      CHECK(f_ab.f.a[i] - f_a.f.a[i] - f_b.f.a[i] + f_e.f.a[i] == Catch::Approx(0.0).margin(1e-12));
    }
  }
}

TEST_CASE("evaluate_multilabel") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  SECTION("oracle sets give recall 1") {
    std::vector<std::vector<int>> sets;
    for (const auto& scene : data.scenes) {
      const auto gt = scene.gt_classes();
      std::vector<int> ids(gt.begin(), gt.end());
      while (static_cast<int>(ids.size()) < cfg.top_k) ids.push_back(-1);  // padding misses
      sets.push_back(ids);
    }
    const MultilabelResult res = evaluate_multilabel(sets, data.scenes, cfg.top_k, data.space.size());
    CHECK(res.recall == Catch::Approx(1.0));
  }
  SECTION("top_k >= K saturates recall regardless of scores") {
    std::vector<std::vector<int>> sets;
    std::vector<int> all_ids(data.space.size());
    for (int i = 0; i < data.space.size(); ++i) all_ids[i] = i;
    for (size_t s = 0; s < data.scenes.size(); ++s) sets.push_back(all_ids);
    const MultilabelResult res = evaluate_multilabel(sets, data.scenes, data.space.size(), data.space.size());
    CHECK(res.recall == Catch::Approx(1.0));
  }
  SECTION("random scores hit a single gt class at rate top_k/K") {
    const int k = 50, top_k = 5, trials = 10000;
    Rng rng(123);
    double recall_sum = 0.0;
    for (int t = 0; t < trials; ++t) {
      CategoryScores s;
      s.s.resize(k);
      for (double& v : s.s) v = rng.uniform();
      const auto ids = topk_select(s, top_k);
      const int gt = static_cast<int>(rng.uniform_int(k));
      recall_sum += std::count(ids.begin(), ids.end(), gt) > 0 ? 1.0 : 0.0;
    }
    CHECK(recall_sum / trials == Catch::Approx(static_cast<double>(top_k) / k).margin(0.02));
  }
}

TEST_CASE("evaluate_detection") {
  Scene s;
  s.id = 0;
  s.grid_h = s.grid_w = 4;
  s.objects = {{0, {0.3, 0.3, 0.2, 0.2}}, {0, {0.7, 0.7, 0.2, 0.2}}, {1, {0.5, 0.5, 0.3, 0.3}}};
  const std::vector<Scene> scenes{s};

  SECTION("exact detections give AP one") {
    std::vector<std::vector<Detection>> dets(1);
    for (const auto& o : s.objects) dets[0].push_back({o.category_id, 1.0, o.box});
    const DetectionEval eval = evaluate_detection(dets, scenes);
    CHECK(eval.mean_ap == Catch::Approx(1.0));
    CHECK(eval.per_class_ap.at(0) == Catch::Approx(1.0));
    CHECK(eval.per_class_ap.at(1) == Catch::Approx(1.0));
  }
  SECTION("no detections give AP zero") {
    const DetectionEval eval = evaluate_detection({{}}, scenes);
    CHECK(eval.mean_ap == 0.0);
  }
  SECTION("five detections over three gts follow the hand PR curve") {
    // single class; gts at A=(0.3,0.3), B=(0.7,0.7), C=(0.5,0.5) size 0.2
    Scene sc;
    sc.id = 0;
    sc.grid_h = sc.grid_w = 4;
    sc.objects = {{0, {0.3, 0.3, 0.2, 0.2}}, {0, {0.7, 0.7, 0.2, 0.2}}, {0, {0.5, 0.5, 0.2, 0.2}}};
    std::vector<std::vector<Detection>> dets(1);
    dets[0] = {
        {0, 0.95, {0.3, 0.3, 0.2, 0.2}},   // TP on A
        {0, 0.90, {0.05, 0.9, 0.1, 0.1}},  // FP
        {0, 0.85, {0.7, 0.7, 0.2, 0.2}},   // TP on B
        {0, 0.80, {0.31, 0.3, 0.2, 0.2}},  // FP: A already claimed
        {0, 0.70, {0.5, 0.5, 0.2, 0.2}},   // TP on C
    };
    // hand PR walk: prec 1, 1/2, 2/3, 2/4, 3/5; recall 1/3, 1/3, 2/3, 2/3, 1
    // 11-pt: r<=1/3 -> max prec at recall>=r is 1.0 (first point)
    //        1/3<r<=2/3 -> 2/3; r>2/3 -> 3/5
    const double expect = (4 * 1.0 + 3 * (2.0 / 3.0) + 4 * (3.0 / 5.0)) / 11.0;
    const DetectionEval eval = evaluate_detection(dets, {sc});
    CHECK(eval.per_class_ap.at(0) == Catch::Approx(expect).margin(1e-12));
  }
  SECTION("equal-score detections are order invariant") {
    std::vector<std::vector<Detection>> d1(1), d2(1);
    d1[0] = {{0, 0.5, {0.3, 0.3, 0.2, 0.2}}, {0, 0.5, {0.7, 0.7, 0.2, 0.2}}, {1, 0.5, {0.5, 0.5, 0.3, 0.3}}};
    d2[0] = {d1[0][1], d1[0][0], d1[0][2]};  // swapped input order
    const DetectionEval e1 = evaluate_detection(d1, scenes);
    const DetectionEval e2 = evaluate_detection(d2, scenes);
    CHECK(e1.per_class_ap == e2.per_class_ap);
  }
}

TEST_CASE("scene jsonl round trip") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  const std::string path = "/tmp/metr_test_scenes.jsonl";
  save_scenes(path, data.scenes);
  const std::vector<Scene> loaded = load_scenes(path);
  REQUIRE(loaded.size() == data.scenes.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].dataset_id == data.scenes[i].dataset_id);
    REQUIRE(loaded[i].objects.size() == data.scenes[i].objects.size());
    for (size_t o = 0; o < loaded[i].objects.size(); ++o) {
      CHECK(loaded[i].objects[o].category_id == data.scenes[i].objects[o].category_id);
      CHECK(loaded[i].objects[o].box == data.scenes[i].objects[o].box);  // bit-exact via shortest round trip
    }
  }
  // byte determinism of the writer
  const std::string path2 = "/tmp/metr_test_scenes2.jsonl";
  save_scenes(path2, loaded);
  CHECK(read_text_file(path) == read_text_file(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("labelspace json round trip") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  const json j = labelspace_to_json(data.space, data.alias_pairs);
  const LabelSpaceInfo info = labelspace_from_json(j);
  CHECK(info.space.size() == data.space.size());
  for (const auto& e : data.space.entries()) CHECK(info.space.name_of(e.global_id) == e.name);
  CHECK(info.alias_pairs == data.alias_pairs);
}

TEST_CASE("sample_loss gradients match finite differences end to end") {
  for (uint64_t seed : {3ULL, 4ULL, 5ULL, 6ULL}) {
    BenchConfig cfg = tiny_config();
    cfg.seed = seed;
    const GeneratedData data = generate_datasets(cfg);
    DeskModel model = init_model(data, cfg);
    const MatchWeights weights;
    const FocalConfig focal_cfg;
    const AslConfig asl_cfg;

    // pick a scene whose gt classes saturate top_k so the category set
    // cannot flip under parameter perturbation
    const Scene* scene = nullptr;
    for (const auto& s : data.scenes) {
      if (static_cast<int>(s.gt_classes().size()) == cfg.top_k) {
        scene = &s;
        break;
      }
    }
    REQUIRE(scene != nullptr);
    const Features feat = synthesize_features(*scene, model.table, cfg.seed);

    ModelGrads grads = ModelGrads::zeros(model);
    sample_loss(model, *scene, feat, weights, focal_cfg, asl_cfg, &grads);

    auto loss = [&]() {
      return sample_loss(model, *scene, feat, weights, focal_cfg, asl_cfg, nullptr).total();
    };

    std::vector<testutil::ParamRef> refs;
    testutil::collect(model.cem, grads.cem, refs);
    testutil::collect(model.head, grads.head, refs);
    testutil::collect(model.base_content, grads.base_content, "base_content", refs);
    testutil::collect(model.table.rows, grads.embeddings, "embeddings", refs);

    const double h = 1e-5;
    int checked = 0, failed = 0;
    for (const auto& ref : refs) {
      const double saved = *ref.value;
      *ref.value = saved + h;
      const double lu = loss();
      *ref.value = saved - h;
      const double ld = loss();
      *ref.value = saved;
      const double numeric = (lu - ld) / (2 * h);
      ++checked;
      if (!oracle::grad_matches(*ref.grad, numeric, 2e-4)) {
        ++failed;
        INFO("seed " << seed << " param " << ref.name << " analytic " << *ref.grad << " numeric " << numeric);
        CHECK(false);
        if (failed > 5) break;
      }
    }
    CHECK(checked > 1000);
    CHECK(failed == 0);
  }
}

TEST_CASE("sample_loss enforces the supervision scope") {
  BenchConfig cfg = tiny_config();
  const GeneratedData data = generate_datasets(cfg);
  DeskModel model = init_model(data, cfg);
  Scene bad = data.scenes.front();
  REQUIRE(bad.dataset_id == 0);
  bad.objects[0].category_id = data.datasets[1].local_to_global[2];  // exclusive to dataset 1
  const Features feat = synthesize_features(bad, model.table, cfg.seed);
  CHECK_THROWS_AS(sample_loss(model, bad, feat, MatchWeights{}, FocalConfig{}, AslConfig{}, nullptr), ContractError);
}

TEST_CASE("run_train with zero epochs reports untrained metrics") {
  BenchConfig cfg = tiny_config();
  cfg.epochs = 0;
  const TrainOutput out = run_train(cfg);
  CHECK(out.report.loss_curve.empty());
  CHECK(out.report.diverged_at_epoch == -1);
  CHECK(out.report.multilabel_recall >= 0.0);
  CHECK(out.report.multilabel_recall <= 1.0);
  CHECK(out.report.mean_ap >= 0.0);
}

TEST_CASE("run_train loss decreases and is deterministic") {
  BenchConfig cfg = tiny_config();
  cfg.images_per_dataset = 24;
  cfg.epochs = 6;
  cfg.lr = 0.05;
  const TrainOutput a = run_train(cfg);
  REQUIRE(a.report.loss_curve.size() == 6);
  CHECK(a.report.loss_curve.back() < a.report.loss_curve.front());

  const TrainOutput b = run_train(cfg);
  CHECK(a.report.loss_curve == b.report.loss_curve);  // bit-identical
  CHECK(a.report.per_class_ap == b.report.per_class_ap);
  CHECK(a.report.multilabel_recall == b.report.multilabel_recall);
  CHECK(report_to_json(a.report).dump(2) == report_to_json(b.report).dump(2));
}

TEST_CASE("checkpoint round trip restores the model exactly") {
  BenchConfig cfg = tiny_config();
  cfg.epochs = 2;
  const TrainOutput out = run_train(cfg);
  const std::string path = "/tmp/metr_test_ckpt.bin";
  model_to_checkpoint(out.model).save(path);

  DeskModel restored = out.model;
  // scramble, then restore from disk
  for (double& v : restored.cem.score_proj.a) v = 0.0;
  for (double& v : restored.table.rows.a) v = 0.0;
  checkpoint_to_model(Checkpoint::load(path), restored);
  CHECK(restored.cem.score_proj.a == out.model.cem.score_proj.a);
  CHECK(restored.table.rows.a == out.model.table.rows.a);
  CHECK(restored.base_content == out.model.base_content);

  // save -> load -> save byte identity
  const std::string path2 = "/tmp/metr_test_ckpt2.bin";
  model_to_checkpoint(restored).save(path2);
  CHECK(read_text_file(path) == read_text_file(path2));

  // detections agree exactly on the restored model
  const Features feat = synthesize_features(out.eval_scenes.front(), out.model.world_table, cfg.seed);
  const auto d1 = detect(feat, out.model.table, out.model.cem, out.model.head, out.model.base_content, cfg.top_k,
                         cfg.n_per_class, 0.0);
  const auto d2 = detect(feat, restored.table, restored.cem, restored.head, restored.base_content, cfg.top_k,
                         cfg.n_per_class, 0.0);
  REQUIRE(d1.size() == d2.size());
  for (size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1[i].score == d2[i].score);
    CHECK(d1[i].box == d2[i].box);
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("compare_modes runs both modes deterministically") {
  BenchConfig cfg = tiny_config();
  cfg.images_per_dataset = 16;
  cfg.epochs = 2;
  const CompareReport rep = compare_modes(cfg);
  CHECK(rep.group.cfg.matching_mode == MatchingMode::kGroup);
  CHECK(rep.merged.cfg.matching_mode == MatchingMode::kStandardMerged);
  CHECK(rep.aliased_classes.size() == 2);
  CHECK(compare_to_json(rep).contains("ap_delta"));
  // config echo preserved verbatim
  CHECK(rep.group.cfg.seed == cfg.seed);
  CHECK(rep.merged.cfg.seed == cfg.seed);
}
