#pragma once

// Iterative post-training: score, drop noisy-probable samples, warm-start
// retrain, keep the round only if validation accuracy improves, otherwise
// roll back and stop. Afterwards, removed samples can be relabeled by the
// final model and a fresh model trained on the result.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "infrank/classifier.hpp"
#include "infrank/dataset.hpp"
#include "infrank/error.hpp"
#include "infrank/random.hpp"
#include "infrank/scores.hpp"

namespace infrank {

// ---------------------------------------------------------------------------
// Detection metrics

struct DetectionMetrics {
    std::size_t removed = 0;
    std::size_t true_positives = 0;
    std::size_t flipped_total = 0;
    std::optional<double> precision;  // absent when nothing was removed
    std::optional<double> recall;     // absent when nothing was flipped
    double f1 = 0.0;
    double remaining_noise_ratio = 0.0;  // flipped fraction of the survivors
};

/// Scores a removal against ground truth. Every sample needs a true label;
/// removed ids not present in `original` are ignored.
inline DetectionMetrics detection_metrics(const LabeledDataset& original, std::span<const SampleId> removed) {
    require(original.has_true_labels(), ErrorKind::kMissingTrueLabel, "detection metrics need true labels");
    const std::set<SampleId> gone(removed.begin(), removed.end());
    DetectionMetrics m;
    std::size_t survivors = 0, noisy_survivors = 0;
    for (const auto& s : original) {
        const bool flipped = s.is_flipped();
        if (flipped) ++m.flipped_total;
        if (gone.count(s.id)) {
            ++m.removed;
            if (flipped) ++m.true_positives;
        } else {
            ++survivors;
            if (flipped) ++noisy_survivors;
        }
    }
    if (m.removed) m.precision = static_cast<double>(m.true_positives) / static_cast<double>(m.removed);
    if (m.flipped_total) m.recall = static_cast<double>(m.true_positives) / static_cast<double>(m.flipped_total);
    if (m.precision && m.recall && *m.precision + *m.recall > 0.0)
        m.f1 = 2.0 * *m.precision * *m.recall / (*m.precision + *m.recall);
    m.remaining_noise_ratio = survivors ? static_cast<double>(noisy_survivors) / static_cast<double>(survivors) : 0.0;
    return m;
}

inline nlohmann::json to_json(const DetectionMetrics& m) {
    nlohmann::json j{{"removed", m.removed},
                     {"true_positives", m.true_positives},
                     {"flipped_total", m.flipped_total},
                     {"f1", m.f1},
                     {"remaining_noise_ratio", m.remaining_noise_ratio}};
    j["precision"] = m.precision ? nlohmann::json(*m.precision) : nlohmann::json(nullptr);
    j["recall"] = m.recall ? nlohmann::json(*m.recall) : nlohmann::json(nullptr);
    return j;
}

// ---------------------------------------------------------------------------
// Small-loss baseline

struct SmallLossOptions {
    /// Take the top fraction by loss instead of the GMM threshold.
    std::optional<double> fraction;
    GmmConfig gmm;
};

/// High-loss samples. Without a fraction, losses go through the same pipeline
/// as the influence scores: z-score, keep z >= 0, fit the two-Gaussian mixture
/// on those, select z >= mean of the low component. Equal losses select nothing.
inline std::vector<SampleId> small_loss_select(const Mlp& m, const LabeledDataset& train,
                                               const SmallLossOptions& opts = {}) {
    if (train.empty()) return {};
    const Eigen::VectorXd losses = sample_losses(m, train.samples());
    std::vector<SampleId> out;
    if (opts.fraction) {
        require(*opts.fraction >= 0.0 && *opts.fraction <= 1.0, ErrorKind::kInvalidArgument,
                "small-loss fraction must be in [0, 1]");
        std::vector<std::size_t> idx(train.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return losses[static_cast<Eigen::Index>(a)] > losses[static_cast<Eigen::Index>(b)];
        });
        idx.resize(noise_flip_count(*opts.fraction, idx.size()));
        for (std::size_t i : idx) out.push_back(train[i].id);
        std::sort(out.begin(), out.end());
        return out;
    }
    const std::vector<double> raw(losses.data(), losses.data() + losses.size());
    PopulationStats st;
    const auto z = zscores(raw, &st);
    if (st.std == 0.0) return {};
    std::vector<double> cand_z;
    std::vector<SampleId> cand_ids;
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i] >= 0.0) {
            cand_z.push_back(z[i]);
            cand_ids.push_back(train[i].id);
        }
    if (cand_z.size() < kMinGmmValues) return cand_ids;
    const GmmFit fit = fit_gmm_2(cand_z, opts.gmm);
    for (std::size_t i = 0; i < cand_z.size(); ++i)
        if (cand_z[i] >= fit.low_mean()) out.push_back(cand_ids[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Post-training loop

enum class SelectorKind { kInfluence, kSmallLoss };

struct PostTrainConfig {
    int epochs = 10;  // per round
    int max_rounds = 3;
    double saturation_delta = 0.001;  // validation-accuracy gain needed to commit (0.1 points)
    double refine_threshold = 0.8;
    SelectionConfig selection;
    /// Learning schedule for each warm-started round; its epoch count is replaced by `epochs`.
    TrainConfig retrain{.epochs = 10, .learning_rate = 0.1, .lr_drops = {{5, 0.1}}};
    ScoringOptions scoring;
    SelectorKind selector = SelectorKind::kInfluence;
    SmallLossOptions small_loss;
    std::uint64_t seed = 0;
};

inline void validate(const PostTrainConfig& cfg, int num_classes) {
    require(cfg.epochs >= 1, ErrorKind::kInvalidArgument, "post-training epochs must be >= 1");
    require(cfg.max_rounds >= 1, ErrorKind::kInvalidArgument, "max_rounds must be >= 1");
    require(cfg.refine_threshold > 0.0 && cfg.refine_threshold <= 1.0, ErrorKind::kInvalidArgument,
            "refine threshold must be in (0, 1]");
    if (cfg.selector == SelectorKind::kInfluence) validate(cfg.selection, num_classes);
}

enum class RoundOutcome { kCommitted, kRolledBack, kNoneSelected, kEmptyCleanSet };

constexpr const char* to_string(RoundOutcome o) {
    switch (o) {
        case RoundOutcome::kCommitted: return "committed";
        case RoundOutcome::kRolledBack: return "rolled_back";
        case RoundOutcome::kNoneSelected: return "none_selected";
        case RoundOutcome::kEmptyCleanSet: return "empty_clean_set";
    }
    return "unknown";
}

struct RoundReport {
    int round = 0;  // 1-based
    RoundOutcome outcome = RoundOutcome::kCommitted;
    std::vector<SampleId> selected;
    std::vector<SampleId> removed;  // equals `selected` only when committed
    std::size_t clean_size_before = 0;
    std::size_t clean_size_after = 0;
    double val_acc_before = 0.0;
    std::optional<double> val_acc_candidate;  // retrained model, whether kept or not
    double val_acc_after = 0.0;               // model in effect after the round
    std::optional<double> precision;              // of `selected`, with ground truth
    std::optional<double> remaining_noise_ratio;  // of the clean set after the round
    double max_cg_residual = 0.0;
    double wall_time_s = 0.0;
};

struct RefinementStats {
    std::size_t relabeled = 0;  // removed samples given a predicted label
    std::size_t kept = 0;       // confidence above the threshold
    std::size_t discarded = 0;
    std::optional<double> kept_label_accuracy;  // against true labels when known
};

struct AuditReport {
    std::vector<RoundReport> rounds;
    double initial_val_acc = 0.0;
    double final_val_acc = 0.0;
    std::size_t initial_clean_size = 0;
    std::size_t final_clean_size = 0;
    std::string final_model_path;
    std::string refined_dataset_path;
    std::optional<RefinementStats> refinement;

    std::size_t committed_rounds() const {
        return static_cast<std::size_t>(std::count_if(rounds.begin(), rounds.end(), [](const RoundReport& r) {
            return r.outcome == RoundOutcome::kCommitted;
        }));
    }
    bool aborted() const { return !rounds.empty() && rounds.back().outcome == RoundOutcome::kEmptyCleanSet; }
};

struct PostTrainResult {
    Mlp model;
    LabeledDataset clean;  // C after the last committed round
    AuditReport report;
};

/// Called after each round's selection with the scores used (null for the small-loss selector).
using RoundObserver = std::function<void(int round, const ScoringResult*, const Selection*, const Mlp&)>;

inline PostTrainResult post_train(const Mlp& model, const LabeledDataset& train_set, const ValidationSet& val,
                                  const PostTrainConfig& cfg, const RoundObserver& observer = {}) {
    validate(cfg, train_set.num_classes());
    require(!train_set.empty(), ErrorKind::kInsufficientData, "post-training needs a nonempty training set");
    for (const auto& v : val.all())
        require(train_set.find(v.id) == nullptr, ErrorKind::kInvalidArgument,
                "validation sample " + std::to_string(v.id) + " also appears in the training set");
    const std::vector<Sample> val_samples = val.all();
    const bool truth = train_set.has_true_labels();

    PostTrainResult res{model, train_set, {}};
    AuditReport& rep = res.report;
    rep.initial_val_acc = accuracy(model, val_samples);
    rep.initial_clean_size = train_set.size();
    double current_acc = rep.initial_val_acc;

    for (int round = 1; round <= cfg.max_rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        RoundReport rr;
        rr.round = round;
        rr.clean_size_before = res.clean.size();
        rr.val_acc_before = current_acc;

        if (cfg.selector == SelectorKind::kInfluence) {
            ScoringOptions sopts = cfg.scoring;
            sopts.seed = derive_seed(cfg.seed, "scoring", static_cast<std::uint64_t>(round));
            sopts.osd_mode = cfg.selection.osd_mode;
            const ScoringResult scored = compute_scores(res.model, res.clean, val, sopts);
            SelectionConfig scfg = cfg.selection;
            scfg.gmm.seed = derive_seed(cfg.seed, "selection", static_cast<std::uint64_t>(round));
            const Selection sel = select_noisy(scored.table, scfg);
            rr.selected = sel.selected;
            rr.max_cg_residual = scored.max_cg_residual;
            if (observer) observer(round, &scored, &sel, res.model);
        } else {
            rr.selected = small_loss_select(res.model, res.clean, cfg.small_loss);
            if (observer) observer(round, nullptr, nullptr, res.model);
        }
        if (truth && !rr.selected.empty()) rr.precision = detection_metrics(res.clean, rr.selected).precision;

        auto finish = [&](RoundOutcome outcome) {
            rr.outcome = outcome;
            rr.clean_size_after = res.clean.size();
            rr.val_acc_after = current_acc;
            if (truth) rr.remaining_noise_ratio = detection_metrics(res.clean, {}).remaining_noise_ratio;
            rr.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            rep.rounds.push_back(rr);
        };

        if (rr.selected.empty()) {
            finish(RoundOutcome::kNoneSelected);
            break;
        }
        const LabeledDataset next_clean = res.clean.without({rr.selected.begin(), rr.selected.end()});
        if (next_clean.empty()) {
            finish(RoundOutcome::kEmptyCleanSet);
            break;
        }
        TrainConfig tcfg = cfg.retrain;
        tcfg.epochs = cfg.epochs;
        tcfg.seed = derive_seed(cfg.seed, "retrain", static_cast<std::uint64_t>(round));
        Mlp candidate = train(res.model, next_clean, tcfg);
        const double acc = accuracy(candidate, val_samples);
        rr.val_acc_candidate = acc;
        if (acc - current_acc >= cfg.saturation_delta) {
            res.model = std::move(candidate);
            res.clean = next_clean;
            current_acc = acc;
            rr.removed = rr.selected;
            finish(RoundOutcome::kCommitted);
        } else {
            finish(RoundOutcome::kRolledBack);  // model and clean set stay at the snapshot
            break;
        }
    }
    rep.final_val_acc = current_acc;
    rep.final_clean_size = res.clean.size();
    return res;
}

// ---------------------------------------------------------------------------
// Label refinement and final retraining

struct Refinement {
    std::vector<Sample> kept;       // relabeled with the model's prediction
    std::vector<Sample> discarded;  // prediction not confident enough
};

/// Relabels each removed sample with the model's argmax; keeps it only when
/// the top softmax probability is strictly above `threshold`.
inline Refinement refine_labels(const Mlp& m, std::span<const Sample> removed, double threshold) {
    require(threshold > 0.0 && threshold <= 1.0, ErrorKind::kInvalidArgument, "refine threshold must be in (0, 1]");
    Refinement out;
    if (removed.empty()) return out;
    const Eigen::MatrixXd p = predict_batch(m, removed);
    for (std::size_t i = 0; i < removed.size(); ++i) {
        const auto col = p.col(static_cast<Eigen::Index>(i));
        const int label = argmax(col);
        Sample s = removed[i];
        if (col[label] > threshold) {
            s.label = label;
            out.kept.push_back(std::move(s));
        } else {
            out.discarded.push_back(std::move(s));
        }
    }
    return out;
}

inline RefinementStats refinement_stats(const Refinement& r) {
    RefinementStats st;
    st.relabeled = r.kept.size() + r.discarded.size();
    st.kept = r.kept.size();
    st.discarded = r.discarded.size();
    const bool truth = std::all_of(r.kept.begin(), r.kept.end(), [](const Sample& s) { return s.true_label.has_value(); });
    if (truth && !r.kept.empty()) {
        const auto hits = std::count_if(r.kept.begin(), r.kept.end(), [](const Sample& s) { return !s.is_flipped(); });
        st.kept_label_accuracy = static_cast<double>(hits) / static_cast<double>(r.kept.size());
    }
    return st;
}

/// Fresh initialization trained on the surviving clean set plus kept relabels.
inline Mlp final_retrain(std::uint64_t init_seed, const std::vector<int>& layer_dims,
                         const LabeledDataset& clean_plus_refined, const TrainConfig& cfg) {
    require(!clean_plus_refined.empty(), ErrorKind::kInsufficientData, "refined dataset is empty");
    return train(init_model(layer_dims, init_seed), clean_plus_refined, cfg);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const RoundReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return nlohmann::json{
        {"round", r.round},
        {"outcome", to_string(r.outcome)},
        {"selected", r.selected},
        {"removed", r.removed},
        {"num_selected", r.selected.size()},
        {"num_removed", r.removed.size()},
        {"clean_size_before", r.clean_size_before},
        {"clean_size_after", r.clean_size_after},
        {"val_acc_before", r.val_acc_before},
        {"val_acc_candidate", opt(r.val_acc_candidate)},
        {"val_acc_after", r.val_acc_after},
        {"precision", opt(r.precision)},
        {"remaining_noise_ratio", opt(r.remaining_noise_ratio)},
        {"max_cg_residual", r.max_cg_residual},
        {"wall_time_s", r.wall_time_s},
    };
}

inline nlohmann::json to_json(const AuditReport& a) {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& r : a.rounds) rounds.push_back(to_json(r));
    nlohmann::json j{
        {"rounds", rounds},
        {"committed_rounds", a.committed_rounds()},
        {"aborted", a.aborted()},
        {"initial_val_acc", a.initial_val_acc},
        {"final_val_acc", a.final_val_acc},
        {"initial_clean_size", a.initial_clean_size},
        {"final_clean_size", a.final_clean_size},
        {"final_model_path", a.final_model_path},
        {"refined_dataset_path", a.refined_dataset_path},
    };
    if (a.refinement) {
        const auto& r = *a.refinement;
        j["refinement"] = {{"relabeled", r.relabeled},
                           {"kept", r.kept},
                           {"discarded", r.discarded},
                           {"kept_label_accuracy", r.kept_label_accuracy ? nlohmann::json(*r.kept_label_accuracy)
                                                                         : nlohmann::json(nullptr)}};
    }
    return j;
}

/// Plot data, one row per round: round,acc,noise_ratio,removed. The noise
/// ratio cell is empty without ground truth.
inline void write_round_series_csv(std::ostream& os, const AuditReport& a) {
    os << "round,acc,noise_ratio,removed\n";
    for (const auto& r : a.rounds) {
        os << r.round << ',' << detail::format_double(r.val_acc_after) << ',';
        if (r.remaining_noise_ratio) os << detail::format_double(*r.remaining_noise_ratio);
        os << ',' << r.removed.size() << '\n';
    }
}

}  // namespace infrank
