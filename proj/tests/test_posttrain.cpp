#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "infrank/infrank.hpp"

using namespace infrank;

namespace {

LabeledDataset tiny_truth_set() {
    // ids 0..9, ids 1, 4, 7 flipped
    std::vector<Sample> s;
    for (int i = 0; i < 10; ++i) {
        Sample x;
        x.id = i;
        x.features = Eigen::VectorXd::Constant(1, i);
        x.true_label = i % 2;
        x.label = (i == 1 || i == 4 || i == 7) ? 1 - i % 2 : i % 2;
        s.push_back(x);
    }
    return LabeledDataset(s, 2, 1);
}

// Uniform softmax everywhere: every sample has loss ln K.
Mlp flat_model(std::vector<int> dims) {
    Mlp m = init_model(std::move(dims), 3);
    m.set_parameters(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.parameter_count())));
    return m;
}

struct BlobRun {
    LabeledDataset clean;
    LabeledDataset noisy;
    ValidationSet val;
    Mlp model;
};

BlobRun blob_run(std::uint64_t seed, double noise, int epochs) {
    auto full = generate_blobs(55, 4, 2, 4.0, derive_seed(seed, "data"));
    auto [tr, val] = split_validation(full, 5, derive_seed(seed, "split"));
    auto noisy = inject_noise(tr, {noise, derive_seed(seed, "noise")});
    TrainConfig tc;
    tc.epochs = epochs;
    tc.learning_rate = 0.01;
    tc.seed = seed;
    Mlp m = train(init_model({2, 16, 4}, seed), noisy, tc);
    return {tr, noisy, val, m};
}

PostTrainConfig quick_config(std::uint64_t seed) {
    PostTrainConfig pc;
    pc.epochs = 4;
    pc.retrain.learning_rate = 0.01;
    pc.retrain.lr_drops = {{2, 0.1}};
    pc.selection.gamma = 2;
    pc.seed = seed;
    return pc;
}

std::vector<SampleId> flipped_ids(const LabeledDataset& ds) {
    std::vector<SampleId> out;
    for (const auto& s : ds)
        if (s.is_flipped()) out.push_back(s.id);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(DetectionMetrics, ExactFlippedSetIsPerfect) {
    const auto ds = tiny_truth_set();
    const std::vector<SampleId> removed{1, 4, 7};
    const auto m = detection_metrics(ds, removed);
    ASSERT_TRUE(m.precision && m.recall);
    EXPECT_DOUBLE_EQ(*m.precision, 1.0);
    EXPECT_DOUBLE_EQ(*m.recall, 1.0);
    EXPECT_DOUBLE_EQ(m.f1, 1.0);
    EXPECT_DOUBLE_EQ(m.remaining_noise_ratio, 0.0);
}

TEST(DetectionMetrics, NothingRemovedLeavesPrecisionAbsent) {
    const auto ds = tiny_truth_set();
    const auto m = detection_metrics(ds, {});
    EXPECT_FALSE(m.precision.has_value());
    ASSERT_TRUE(m.recall.has_value());
    EXPECT_DOUBLE_EQ(*m.recall, 0.0);
    EXPECT_DOUBLE_EQ(m.f1, 0.0);
    EXPECT_DOUBLE_EQ(m.remaining_noise_ratio, 0.3);
}

TEST(DetectionMetrics, PartialRemovalCounts) {
    const auto ds = tiny_truth_set();
    const std::vector<SampleId> removed{1, 2, 3, 999};  // 999 is unknown and ignored
    const auto m = detection_metrics(ds, removed);
    EXPECT_EQ(m.removed, 3u);
    EXPECT_EQ(m.true_positives, 1u);
    EXPECT_DOUBLE_EQ(*m.precision, 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(*m.recall, 1.0 / 3.0);
    EXPECT_NEAR(m.f1, 1.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(m.remaining_noise_ratio, 2.0 / 7.0);
}

TEST(DetectionMetrics, NoFlipsLeavesRecallAbsent) {
    const auto ds = generate_blobs(5, 2, 2, 3.0, 1);
    const std::vector<SampleId> removed{0};
    const auto m = detection_metrics(ds, removed);
    EXPECT_FALSE(m.recall.has_value());
    EXPECT_DOUBLE_EQ(*m.precision, 0.0);
    EXPECT_DOUBLE_EQ(m.remaining_noise_ratio, 0.0);
}

TEST(DetectionMetrics, NeedsTrueLabels) {
    std::vector<Sample> s(1);
    s[0].features = Eigen::VectorXd::Zero(1);
    const LabeledDataset ds(s, 2, 1);
    try {
        detection_metrics(ds, {});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kMissingTrueLabel);
    }
}

TEST(DetectionMetrics, JsonHasNullForAbsentPrecision) {
    const auto j = to_json(detection_metrics(tiny_truth_set(), {}));
    EXPECT_TRUE(j["precision"].is_null());
    EXPECT_DOUBLE_EQ(j["recall"].get<double>(), 0.0);
}

// ---------------------------------------------------------------------------

TEST(SmallLoss, EqualLossesSelectNothing) {
    const auto ds = tiny_truth_set();
    const Mlp m = flat_model({1, 2});
    EXPECT_TRUE(small_loss_select(m, ds).empty());
}

TEST(SmallLoss, FractionTakesHighestLosses) {
    const auto run = blob_run(2, 0.4, 30);
    SmallLossOptions opts;
    opts.fraction = 0.1;
    const auto sel = small_loss_select(run.model, run.noisy, opts);
    ASSERT_EQ(sel.size(), noise_flip_count(0.1, run.noisy.size()));
    const Eigen::VectorXd losses = sample_losses(run.model, run.noisy.samples());
    const std::set<SampleId> chosen(sel.begin(), sel.end());
    double min_in = 1e300, max_out = -1e300;
    for (std::size_t i = 0; i < run.noisy.size(); ++i) {
        const double l = losses[static_cast<Eigen::Index>(i)];
        if (chosen.count(run.noisy[i].id)) min_in = std::min(min_in, l);
        else max_out = std::max(max_out, l);
    }
    EXPECT_GE(min_in, max_out);
}

TEST(SmallLoss, FractionOutOfRangeThrows) {
    SmallLossOptions opts;
    opts.fraction = 1.5;
    EXPECT_THROW(small_loss_select(flat_model({1, 2}), tiny_truth_set(), opts), Error);
}

TEST(SmallLoss, FewCandidatesAreAllSelected) {
    // Logistic model on a 1-D line; two samples sit far on the wrong side and
    // carry almost all the loss, so only they have a nonnegative z-score.
    std::vector<Sample> s;
    for (int i = 0; i < 12; ++i) {
        Sample x;
        x.id = i;
        x.features = Eigen::VectorXd::Constant(1, i < 6 ? -1.0 - i : 1.0 + i);
        x.label = i < 6 ? 0 : 1;
        x.true_label = x.label;
        s.push_back(x);
    }
    s[5].label = 1;
    s[6].label = 0;
    const LabeledDataset ds(s, 2, 1);
    Mlp m = init_model({1, 2}, 0);
    Eigen::VectorXd theta(4);
    theta << -1.0, 1.0, 0.0, 0.0;  // weights then biases: logits (-x, x)
    m.set_parameters(theta);
    EXPECT_EQ(small_loss_select(m, ds), (std::vector<SampleId>{5, 6}));
}

TEST(SmallLoss, ShortTrainingBeatsNoiseRate) {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto run = blob_run(seed, 0.5, 20);
        const auto sel = small_loss_select(run.model, run.noisy);
        ASSERT_FALSE(sel.empty());
        EXPECT_GT(*detection_metrics(run.noisy, sel).precision, 0.5) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------

TEST(RefineLabels, ThresholdOneKeepsNothing) {
    const auto run = blob_run(1, 0.4, 50);
    const auto r = refine_labels(run.model, run.noisy.samples(), 1.0);
    EXPECT_TRUE(r.kept.empty());
    EXPECT_EQ(r.discarded.size(), run.noisy.size());
}

TEST(RefineLabels, KeepsExactlyTheConfidentPredictions) {
    const auto run = blob_run(4, 0.4, 50);
    const auto r = refine_labels(run.model, run.noisy.samples(), 0.8);
    EXPECT_EQ(r.kept.size() + r.discarded.size(), run.noisy.size());
    for (const auto& s : r.kept) {
        const Eigen::VectorXd p = predict(run.model, s.features);
        EXPECT_GT(p.maxCoeff(), 0.8);
        EXPECT_EQ(s.label, argmax(p));
    }
    for (const auto& s : r.discarded) {
        EXPECT_LE(predict(run.model, s.features).maxCoeff(), 0.8);
        EXPECT_EQ(s, *run.noisy.find(s.id));  // untouched
    }
}

TEST(RefineLabels, CleanModelRestoresFlippedLabels) {
    const auto run = blob_run(5, 0.4, 1);
    TrainConfig tc;
    tc.epochs = 200;
    tc.learning_rate = 0.01;
    const Mlp clean_model = train(init_model({2, 16, 4}, 5), run.clean, tc);
    const auto flipped = flipped_ids(run.noisy);
    std::vector<Sample> removed;
    for (auto id : flipped) removed.push_back(*run.noisy.find(id));
    const auto stats = refinement_stats(refine_labels(clean_model, removed, 0.8));
    EXPECT_EQ(stats.relabeled, removed.size());
    EXPECT_GT(stats.kept, removed.size() / 2);
    ASSERT_TRUE(stats.kept_label_accuracy.has_value());
    EXPECT_GE(*stats.kept_label_accuracy, 0.95);
}

TEST(RefineLabels, EmptyInputAndBadThreshold) {
    const Mlp m = flat_model({1, 2});
    const auto r = refine_labels(m, {}, 0.8);
    EXPECT_TRUE(r.kept.empty() && r.discarded.empty());
    const auto ds = tiny_truth_set();
    EXPECT_THROW(refine_labels(m, ds.samples(), 0.0), Error);
    EXPECT_THROW(refine_labels(m, ds.samples(), 1.01), Error);
}

// ---------------------------------------------------------------------------

TEST(FinalRetrain, EmptyAdditionsMatchPlainTraining) {
    const auto run = blob_run(6, 0.2, 1);
    TrainConfig tc;
    tc.epochs = 20;
    tc.seed = 9;
    const Mlp a = final_retrain(77, {2, 16, 4}, run.noisy.with({}), tc);
    const Mlp b = train(init_model({2, 16, 4}, 77), run.noisy, tc);
    EXPECT_TRUE(a == b);
    EXPECT_TRUE(a == final_retrain(77, {2, 16, 4}, run.noisy, tc));
}

TEST(FinalRetrain, EmptyDatasetThrows) {
    TrainConfig tc;
    try {
        final_retrain(1, {2, 4, 2}, LabeledDataset({}, 2, 2), tc);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kInsufficientData);
    }
}

// ---------------------------------------------------------------------------

TEST(PostTrain, NoneSelectedIsANoOp) {
    auto run = blob_run(1, 0.4, 1);
    const Mlp flat = flat_model({2, 16, 4});
    PostTrainConfig pc = quick_config(1);
    pc.selector = SelectorKind::kSmallLoss;
    const auto res = post_train(flat, run.noisy, run.val, pc);
    ASSERT_EQ(res.report.rounds.size(), 1u);
    EXPECT_EQ(res.report.rounds[0].outcome, RoundOutcome::kNoneSelected);
    EXPECT_FALSE(res.report.rounds[0].val_acc_candidate.has_value());
    EXPECT_TRUE(res.model == flat);
    EXPECT_TRUE(res.clean == run.noisy);
}

TEST(PostTrain, FailedSaturationRollsBackBitExactly) {
    const auto run = blob_run(2, 0.4, 100);
    PostTrainConfig pc = quick_config(2);
    pc.saturation_delta = 2.0;  // unreachable gain
    int calls = 0;
    const auto res = post_train(run.model, run.noisy, run.val, pc,
                                [&](int, const ScoringResult* s, const Selection* sel, const Mlp& current) {
                                    ++calls;
                                    EXPECT_NE(s, nullptr);
                                    EXPECT_NE(sel, nullptr);
                                    EXPECT_TRUE(current == run.model);
                                });
    EXPECT_EQ(calls, 1);
    ASSERT_EQ(res.report.rounds.size(), 1u);
    const auto& r = res.report.rounds[0];
    ASSERT_EQ(r.outcome, RoundOutcome::kRolledBack) << "selected " << r.selected.size();
    EXPECT_TRUE(r.removed.empty());
    EXPECT_TRUE(r.val_acc_candidate.has_value());
    EXPECT_TRUE(res.model == run.model);
    EXPECT_EQ(res.model.parameters(), run.model.parameters());
    EXPECT_TRUE(res.clean == run.noisy);
    EXPECT_EQ(res.report.final_val_acc, res.report.initial_val_acc);
}

TEST(PostTrain, ForcedCommitsKeepReportConsistent) {
    const auto run = blob_run(3, 0.4, 100);
    PostTrainConfig pc = quick_config(3);
    pc.saturation_delta = -2.0;  // accept every round
    pc.max_rounds = 3;
    const auto res = post_train(run.model, run.noisy, run.val, pc);
    const auto& rep = res.report;
    ASSERT_FALSE(rep.rounds.empty());
    EXPECT_LE(rep.rounds.size(), 3u);

    std::set<SampleId> current;
    for (auto id : run.noisy.ids()) current.insert(id);
    std::size_t total_removed = 0;
    for (std::size_t i = 0; i < rep.rounds.size(); ++i) {
        const auto& r = rep.rounds[i];
        EXPECT_EQ(r.round, static_cast<int>(i + 1));
        EXPECT_EQ(r.clean_size_before, current.size());
        for (auto id : r.removed) EXPECT_EQ(current.erase(id), 1u) << "removed id not in previous clean set";
        total_removed += r.removed.size();
        EXPECT_EQ(r.clean_size_after, current.size());
        ASSERT_TRUE(r.remaining_noise_ratio.has_value());
        EXPECT_GE(*r.remaining_noise_ratio, 0.0);
        EXPECT_LE(*r.remaining_noise_ratio, 1.0);
        if (r.outcome == RoundOutcome::kCommitted) {
            EXPECT_EQ(r.val_acc_after, *r.val_acc_candidate);
            if (i + 1 < rep.rounds.size()) {
                EXPECT_EQ(rep.rounds[i + 1].val_acc_before, r.val_acc_after);
            }
        }
    }
    EXPECT_EQ(total_removed, rep.initial_clean_size - rep.final_clean_size);
    EXPECT_EQ(res.clean.size(), rep.final_clean_size);
    EXPECT_DOUBLE_EQ(rep.final_val_acc, accuracy(res.model, run.val.all()));
    EXPECT_GE(rep.committed_rounds(), 1u);
}

TEST(PostTrain, EmptyCleanSetAborts) {
    const auto run = blob_run(1, 0.4, 20);
    PostTrainConfig pc = quick_config(1);
    pc.selector = SelectorKind::kSmallLoss;
    pc.small_loss.fraction = 1.0;
    const auto res = post_train(run.model, run.noisy, run.val, pc);
    ASSERT_EQ(res.report.rounds.size(), 1u);
    EXPECT_EQ(res.report.rounds[0].outcome, RoundOutcome::kEmptyCleanSet);
    EXPECT_TRUE(res.report.aborted());
    EXPECT_TRUE(res.model == run.model);
    EXPECT_EQ(res.clean.size(), run.noisy.size());
}

TEST(PostTrain, SmallLossSelectorRuns) {
    const auto run = blob_run(2, 0.4, 20);
    PostTrainConfig pc = quick_config(2);
    pc.selector = SelectorKind::kSmallLoss;
    pc.saturation_delta = -2.0;
    pc.max_rounds = 1;
    int calls = 0;
    const auto res = post_train(run.model, run.noisy, run.val, pc,
                                [&](int round, const ScoringResult* s, const Selection* sel, const Mlp&) {
                                    ++calls;
                                    EXPECT_EQ(round, 1);
                                    EXPECT_EQ(s, nullptr);
                                    EXPECT_EQ(sel, nullptr);
                                });
    EXPECT_EQ(calls, 1);
    ASSERT_EQ(res.report.rounds.size(), 1u);
    EXPECT_EQ(res.report.rounds[0].selected, small_loss_select(run.model, run.noisy));
}

TEST(PostTrain, DeterministicUnderSeed) {
    const auto run = blob_run(4, 0.4, 60);
    PostTrainConfig pc = quick_config(4);
    pc.saturation_delta = -2.0;
    pc.max_rounds = 2;
    const auto a = post_train(run.model, run.noisy, run.val, pc);
    const auto b = post_train(run.model, run.noisy, run.val, pc);
    EXPECT_TRUE(a.model == b.model);
    EXPECT_TRUE(a.clean == b.clean);
    ASSERT_EQ(a.report.rounds.size(), b.report.rounds.size());
    for (std::size_t i = 0; i < a.report.rounds.size(); ++i)
        EXPECT_EQ(a.report.rounds[i].selected, b.report.rounds[i].selected);
}

TEST(PostTrain, ValidationOverlapIsRejected) {
    const auto run = blob_run(1, 0.4, 1);
    ValidationSet bad = run.val;
    bad.per_class[0][0] = run.noisy[0];
    bad.per_class[0][0].label = 0;
    try {
        post_train(run.model, run.noisy, bad, quick_config(1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
    }
}

TEST(PostTrain, ConfigValidation) {
    PostTrainConfig pc;
    pc.selection.gamma = 2;
    EXPECT_NO_THROW(validate(pc, 4));
    pc.max_rounds = 0;
    EXPECT_THROW(validate(pc, 4), Error);
    pc = PostTrainConfig{};
    pc.refine_threshold = 0.0;
    EXPECT_THROW(validate(pc, 4), Error);
    pc = PostTrainConfig{};
    pc.selection.gamma = 5;
    EXPECT_THROW(validate(pc, 4), Error);
    pc.selector = SelectorKind::kSmallLoss;  // gamma unused
    EXPECT_NO_THROW(validate(pc, 4));
    EXPECT_DOUBLE_EQ(PostTrainConfig{}.refine_threshold, 0.8);
}

// ---------------------------------------------------------------------------

TEST(Report, RoundSeriesCsv) {
    AuditReport a;
    RoundReport r1;
    r1.round = 1;
    r1.val_acc_after = 0.75;
    r1.removed = {3, 5};
    r1.remaining_noise_ratio = 0.25;
    RoundReport r2;
    r2.round = 2;
    r2.outcome = RoundOutcome::kRolledBack;
    r2.val_acc_after = 0.75;
    a.rounds = {r1, r2};
    std::ostringstream os;
    write_round_series_csv(os, a);
    EXPECT_EQ(os.str(), "round,acc,noise_ratio,removed\n1,0.75,0.25,2\n2,0.75,,0\n");
}

TEST(Report, JsonFields) {
    AuditReport a;
    RoundReport r;
    r.round = 1;
    r.outcome = RoundOutcome::kEmptyCleanSet;
    r.selected = {1, 2};
    a.rounds = {r};
    a.refinement = RefinementStats{4, 3, 1, 0.5};
    const auto j = to_json(a);
    EXPECT_EQ(j["rounds"][0]["outcome"], "empty_clean_set");
    EXPECT_EQ(j["rounds"][0]["num_selected"], 2);
    EXPECT_TRUE(j["rounds"][0]["precision"].is_null());
    EXPECT_TRUE(j["aborted"].get<bool>());
    EXPECT_EQ(j["committed_rounds"], 0);
    EXPECT_EQ(j["refinement"]["kept"], 3);
    EXPECT_DOUBLE_EQ(j["refinement"]["kept_label_accuracy"].get<double>(), 0.5);
}
