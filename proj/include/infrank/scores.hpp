#pragma once

// Overfitting scores. OSM is the z-scored influence norm over the training
// set; OSD is the z-scored within-class spread of a sample's influence on the
// clean validation samples of each class. Noisy-probable samples are those
// whose OSD clears the low-component mean of a per-class two-Gaussian fit in
// at least gamma classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "infrank/classifier.hpp"
#include "infrank/dataset.hpp"
#include "infrank/error.hpp"
#include "infrank/influence.hpp"
#include "infrank/random.hpp"

namespace infrank {

struct PopulationStats {
    double mean = 0.0;
    double std = 0.0;  // population (divide by n)
};

inline PopulationStats population_stats(std::span<const double> values) {
    PopulationStats st;
    if (values.empty()) return st;
    double sum = 0.0;
    for (double v : values) sum += v;
    st.mean = sum / static_cast<double>(values.size());
    double sq = 0.0;
    for (double v : values) sq += (v - st.mean) * (v - st.mean);
    st.std = std::sqrt(sq / static_cast<double>(values.size()));
    return st;
}

/// z-scores; a zero spread maps every value to 0.
inline std::vector<double> zscores(std::span<const double> values, PopulationStats* stats_out = nullptr) {
    const PopulationStats st = population_stats(values);
    if (stats_out) *stats_out = st;
    std::vector<double> out(values.size(), 0.0);
    if (st.std > 0.0)
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - st.mean) / st.std;
    return out;
}

/// Overfitting score on the model: z-score of the influence norm over all scored samples.
inline std::map<SampleId, double> compute_osm(const std::map<SampleId, double>& norms,
                                              PopulationStats* stats_out = nullptr) {
    require(!norms.empty(), ErrorKind::kInsufficientData, "no influence norms to score");
    std::vector<double> values;
    values.reserve(norms.size());
    for (const auto& [id, v] : norms) values.push_back(v);
    const auto z = zscores(values, stats_out);
    std::map<SampleId, double> out;
    std::size_t i = 0;
    for (const auto& [id, v] : norms) out[id] = z[i++];
    return out;
}

/// Domain over which the per-class spreads s_k(i) are z-scored.
enum class OsdNormalization {
    kOverCandidates,  // per class k, across candidate samples (default)
    kOverClasses,     // per candidate i, across classes k
};

struct OsdResult {
    std::map<SampleId, std::vector<double>> spread;  // s_k(i), raw population std
    std::map<SampleId, std::vector<double>> osd;     // normalized
    std::vector<PopulationStats> class_stats;        // per class (kOverCandidates only)
};

/// Overfitting score on data for each candidate and class. `table` must hold a
/// row for every candidate covering every validation sample.
inline OsdResult compute_osd(std::span<const InfluenceOnData> table, const ValidationSet& val,
                             std::span<const SampleId> candidates, int num_classes,
                             OsdNormalization mode = OsdNormalization::kOverCandidates) {
    require(!candidates.empty(), ErrorKind::kInsufficientData, "no OSD candidates");
    for (int k = 0; k < num_classes; ++k) {
        auto it = val.per_class.find(k);
        require(it != val.per_class.end() && it->second.size() >= 2, ErrorKind::kInsufficientData,
                "class " + std::to_string(k) + " needs at least 2 validation samples for OSD");
    }
    std::map<SampleId, const InfluenceOnData*> rows;
    for (const auto& row : table) rows[row.train_id] = &row;

    OsdResult res;
    std::vector<double> buf;
    for (SampleId id : candidates) {
        auto r = rows.find(id);
        require(r != rows.end(), ErrorKind::kInsufficientData, "no influence row for candidate " + std::to_string(id));
        std::vector<double> s(static_cast<std::size_t>(num_classes));
        for (int k = 0; k < num_classes; ++k) {
            buf.clear();
            for (const auto& v : val.per_class.at(k)) {
                auto hit = r->second->values.find(v.id);
                require(hit != r->second->values.end(), ErrorKind::kInsufficientData,
                        "missing influence of " + std::to_string(id) + " on validation sample " + std::to_string(v.id));
                buf.push_back(hit->second);
            }
            s[static_cast<std::size_t>(k)] = population_stats(buf).std;
        }
        res.spread[id] = std::move(s);
    }

    if (mode == OsdNormalization::kOverClasses) {
        for (const auto& [id, s] : res.spread) res.osd[id] = zscores(s);
        return res;
    }
    res.class_stats.resize(static_cast<std::size_t>(num_classes));
    for (const auto& [id, s] : res.spread) res.osd[id].resize(s.size());
    for (int k = 0; k < num_classes; ++k) {
        buf.clear();
        for (const auto& [id, s] : res.spread) buf.push_back(s[static_cast<std::size_t>(k)]);
        const auto z = zscores(buf, &res.class_stats[static_cast<std::size_t>(k)]);
        std::size_t i = 0;
        for (auto& [id, o] : res.osd) o[static_cast<std::size_t>(k)] = z[i++];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Two-component 1-D Gaussian mixture

struct GmmConfig {
    double variance_floor = 1e-6;
    int max_iter = 200;
    double tol = 1e-8;  // relative log-likelihood change
    std::uint64_t seed = 0;
};

struct GmmFit {
    std::array<double, 2> weights{0.5, 0.5};
    std::array<double, 2> means{0.0, 0.0};  // means[0] <= means[1]
    std::array<double, 2> variances{1.0, 1.0};
    std::vector<double> log_likelihood;  // one entry per E-step
    bool converged = false;
    bool restarted = false;

    double low_mean() const { return means[0]; }
    double high_mean() const { return means[1]; }
};

namespace detail {

inline double log_normal(double x, double mean, double var) {
    return -0.5 * (std::log(2.0 * std::numbers::pi * var) + (x - mean) * (x - mean) / var);
}

inline GmmFit run_em(std::span<const double> xs, GmmFit fit, const GmmConfig& cfg) {
    const std::size_t n = xs.size();
    std::vector<double> resp(n);  // responsibility of component 1
    for (int it = 0;; ++it) {
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double l0 = std::log(fit.weights[0]) + log_normal(xs[i], fit.means[0], fit.variances[0]);
            const double l1 = std::log(fit.weights[1]) + log_normal(xs[i], fit.means[1], fit.variances[1]);
            const double mx = std::max(l0, l1);
            const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
            ll += lse;
            resp[i] = std::exp(l1 - lse);
        }
        if (!fit.log_likelihood.empty()) {
            const double prev = fit.log_likelihood.back();
            if (std::abs(ll - prev) < cfg.tol * std::max(1.0, std::abs(prev))) fit.converged = true;
        }
        fit.log_likelihood.push_back(ll);
        if (fit.converged || it >= cfg.max_iter) break;

        std::array<double, 2> nk{0.0, 0.0}, sum{0.0, 0.0};
        for (std::size_t i = 0; i < n; ++i) {
            nk[0] += 1.0 - resp[i];
            nk[1] += resp[i];
            sum[0] += (1.0 - resp[i]) * xs[i];
            sum[1] += resp[i] * xs[i];
        }
        for (int c = 0; c < 2; ++c) {
            if (nk[c] < 1e-12) continue;  // empty component: leave as is
            fit.means[c] = sum[c] / nk[c];
        }
        std::array<double, 2> sq{0.0, 0.0};
        for (std::size_t i = 0; i < n; ++i) {
            sq[0] += (1.0 - resp[i]) * (xs[i] - fit.means[0]) * (xs[i] - fit.means[0]);
            sq[1] += resp[i] * (xs[i] - fit.means[1]) * (xs[i] - fit.means[1]);
        }
        for (int c = 0; c < 2; ++c) {
            if (nk[c] >= 1e-12) fit.variances[c] = std::max(sq[c] / nk[c], cfg.variance_floor);
            fit.weights[c] = std::max(nk[c] / static_cast<double>(n), 1e-300);
        }
        const double wsum = fit.weights[0] + fit.weights[1];
        fit.weights[0] /= wsum;
        fit.weights[1] /= wsum;
    }
    return fit;
}

inline void canonical_order(GmmFit& fit) {
    if (fit.means[0] > fit.means[1]) {
        std::swap(fit.means[0], fit.means[1]);
        std::swap(fit.variances[0], fit.variances[1]);
        std::swap(fit.weights[0], fit.weights[1]);
    }
}

}  // namespace detail

/// Smallest sample a two-component fit accepts.
inline constexpr std::size_t kMinGmmValues = 4;

/// EM for a two-component 1-D mixture, initialized by splitting the sorted
/// values at the median. If EM does not converge, one seeded random restart is
/// tried and kept when it converges or reaches a higher likelihood.
inline GmmFit fit_gmm_2(std::span<const double> values, const GmmConfig& cfg = {}) {
    require(values.size() >= kMinGmmValues, ErrorKind::kInsufficientData,
            "GMM needs at least 4 values, got " + std::to_string(values.size()));
    for (double v : values) require(std::isfinite(v), ErrorKind::kNumerical, "non-finite value passed to GMM");
    std::vector<double> xs(values.begin(), values.end());
    std::sort(xs.begin(), xs.end());  // makes the fit independent of input order
    const std::size_t half = xs.size() / 2;

    GmmFit init;
    const std::span<const double> lower(xs.data(), half), upper(xs.data() + half, xs.size() - half);
    const auto lo = population_stats(lower), hi = population_stats(upper);
    init.means = {lo.mean, hi.mean};
    init.variances = {std::max(lo.std * lo.std, cfg.variance_floor), std::max(hi.std * hi.std, cfg.variance_floor)};
    GmmFit fit = detail::run_em(xs, init, cfg);

    if (!fit.converged) {
        Rng rng(cfg.seed);
        std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
        const std::size_t a = pick(rng);
        std::size_t b = pick(rng);
        if (b == a) b = (a + 1) % xs.size();
        const auto all = population_stats(xs);
        GmmFit restart_init;
        restart_init.means = {xs[a], xs[b]};
        restart_init.variances = {std::max(all.std * all.std, cfg.variance_floor),
                                  std::max(all.std * all.std, cfg.variance_floor)};
        GmmFit alt = detail::run_em(xs, restart_init, cfg);
        if (alt.converged || alt.log_likelihood.back() > fit.log_likelihood.back()) {
            fit = std::move(alt);
            fit.restarted = true;
        }
    }
    detail::canonical_order(fit);
    return fit;
}

// ---------------------------------------------------------------------------
// Selection

/// Consensus count: 5 under heavy noise (>= 40%), else 8; clipped to [1, K].
inline int default_gamma(double noise_ratio, int num_classes) {
    const int g = noise_ratio >= 0.4 ? 5 : 8;
    return std::clamp(g, 1, num_classes);
}

struct SelectionConfig {
    int gamma = 1;
    int validation_per_class = 5;
    GmmConfig gmm;
    OsdNormalization osd_mode = OsdNormalization::kOverCandidates;
};

struct ScoreTable {
    int num_classes = 2;
    std::map<SampleId, double> norms;  // ||I_M||
    std::map<SampleId, double> osm;
    PopulationStats norm_stats;
    std::map<SampleId, std::vector<double>> spread;  // candidates only
    std::map<SampleId, std::vector<double>> osd;     // candidates only (osm >= 0)
    std::vector<PopulationStats> spread_stats;

    std::vector<SampleId> candidates() const {
        std::vector<SampleId> out;
        for (const auto& [id, v] : osm)
            if (v >= 0.0) out.push_back(id);
        return out;
    }
};

struct Selection {
    std::vector<std::optional<GmmFit>> class_fits;  // empty when too few candidates to fit
    std::vector<double> thresholds;   // mean of the low component, per class
    std::map<SampleId, int> votes;    // candidates only
    std::vector<SampleId> selected;   // ascending ids
};

inline void validate(const SelectionConfig& cfg, int num_classes) {
    require(cfg.gamma >= 1 && cfg.gamma <= num_classes, ErrorKind::kInvalidArgument,
            "gamma must be in [1, " + std::to_string(num_classes) + "]");
}

inline Selection select_noisy(const ScoreTable& scores, const SelectionConfig& cfg) {
    const int k_count = scores.num_classes;
    validate(cfg, k_count);
    Selection sel;
    for (const auto& [id, o] : scores.osd) sel.votes[id] = 0;
    std::vector<double> buf;
    for (int k = 0; k < k_count; ++k) {
        buf.clear();
        for (const auto& [id, o] : scores.osd) buf.push_back(o[static_cast<std::size_t>(k)]);
        // Below kMinGmmValues candidates a two-component fit is meaningless and
        // every candidate counts as inconsistent for this class.
        std::optional<GmmFit> fit;
        double threshold = -std::numeric_limits<double>::infinity();
        if (buf.size() >= kMinGmmValues) {
            GmmConfig gcfg = cfg.gmm;
            gcfg.seed = derive_seed(cfg.gmm.seed, "gmm", static_cast<std::uint64_t>(k));
            fit = fit_gmm_2(buf, gcfg);
            threshold = fit->low_mean();
        }
        for (const auto& [id, o] : scores.osd)
            if (o[static_cast<std::size_t>(k)] >= threshold) ++sel.votes[id];
        sel.class_fits.push_back(std::move(fit));
        sel.thresholds.push_back(threshold);
    }
    for (const auto& [id, v] : sel.votes)
        if (v >= cfg.gamma) sel.selected.push_back(id);
    return sel;
}

// ---------------------------------------------------------------------------
// Full scoring pass

struct ScoringOptions {
    double damping = 0.01;
    std::size_t hessian_subset = 2000;
    std::uint64_t seed = 0;
    CgOptions cg;
    unsigned threads = 1;
    OsdNormalization osd_mode = OsdNormalization::kOverCandidates;
};

struct ScoringResult {
    ScoreTable table;
    std::vector<InfluenceVector> influences;  // every training sample, id order
    std::vector<InfluenceOnData> on_data;     // candidates only
    std::size_t hessian_subset_size = 0;
    double max_cg_residual = 0.0;
};

/// Influences, OSM over `train`, and OSD for its OSM-nonnegative samples.
inline ScoringResult compute_scores(const Mlp& m, const LabeledDataset& train, const ValidationSet& val,
                                    const ScoringOptions& opts = {}) {
    require(train.size() >= 2, ErrorKind::kInsufficientData, "need at least 2 training samples to score");
    require(train.num_classes() == m.num_classes() && train.feature_dim() == m.input_dim(),
            ErrorKind::kDimensionMismatch, "model and dataset shapes differ");
    ScoringResult res;
    const auto subset = sample_subset(train, opts.hessian_subset, derive_seed(opts.seed, "hessian-subset"));
    res.hessian_subset_size = subset.size();
    const HessianOperator h = final_layer_hessian(m, subset, opts.damping);
    res.influences = influence_on_model_all(m, train.samples(), h, opts.cg, opts.threads);

    ScoreTable& t = res.table;
    t.num_classes = train.num_classes();
    for (const auto& iv : res.influences) {
        t.norms[iv.sample_id] = iv.norm();
        res.max_cg_residual = std::max(res.max_cg_residual, iv.cg_residual);
    }
    t.osm = compute_osm(t.norms, &t.norm_stats);

    const std::vector<SampleId> cands = t.candidates();
    const std::vector<Sample> val_samples = val.all();
    const Eigen::MatrixXd val_grads = final_layer_grads(m, val_samples);
    std::map<SampleId, const InfluenceVector*> by_id;
    for (const auto& iv : res.influences) by_id[iv.sample_id] = &iv;
    for (SampleId id : cands) res.on_data.push_back(influence_on_data(*by_id.at(id), val_samples, val_grads));

    OsdResult osd = compute_osd(res.on_data, val, cands, t.num_classes, opts.osd_mode);
    t.spread = std::move(osd.spread);
    t.osd = std::move(osd.osd);
    t.spread_stats = std::move(osd.class_stats);
    return res;
}

/// Score dump: id,osm,osd_k0..osd_k{K-1},votes,selected. OSD cells are empty
/// for samples outside the candidate set.
inline void write_scores_csv(std::ostream& os, const ScoreTable& t, const Selection& sel) {
    os << "id,osm";
    for (int k = 0; k < t.num_classes; ++k) os << ",osd_k" << k;
    os << ",votes,selected\n";
    const std::set<SampleId> chosen(sel.selected.begin(), sel.selected.end());
    for (const auto& [id, osm] : t.osm) {
        os << id << ',' << detail::format_double(osm);
        auto o = t.osd.find(id);
        for (int k = 0; k < t.num_classes; ++k) {
            os << ',';
            if (o != t.osd.end()) os << detail::format_double(o->second[static_cast<std::size_t>(k)]);
        }
        auto v = sel.votes.find(id);
        os << ',' << (v == sel.votes.end() ? 0 : v->second) << ',' << (chosen.count(id) ? 1 : 0) << '\n';
    }
}

}  // namespace infrank
