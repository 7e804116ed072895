#pragma once

// Small ReLU feed-forward classifier trained with mini-batch SGD + momentum.
// The final linear layer (weights and bias) is the parameter block that the
// influence computations work in; everything before it is a feature map.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "infrank/dataset.hpp"
#include "infrank/error.hpp"
#include "infrank/random.hpp"

namespace infrank {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Mlp {
    std::vector<int> layer_dims;  // [d, h1, ..., K]
    std::uint64_t seed = 0;
    std::vector<Eigen::MatrixXd> weights;  // weights[l] is dims[l+1] x dims[l]
    std::vector<Eigen::VectorXd> biases;
    // Fixed affine input standardization, x' = (x - shift) / scale. Empty means identity.
    Eigen::VectorXd input_shift;
    Eigen::VectorXd input_scale;

    int input_dim() const { return layer_dims.front(); }
    int num_classes() const { return layer_dims.back(); }
    std::size_t num_layers() const { return weights.size(); }
    /// Width of the feature vector fed into the final layer.
    int penultimate_dim() const { return layer_dims[layer_dims.size() - 2]; }
    /// Size of the final-layer parameter block, (h_last + 1) * K.
    int final_layer_size() const { return (penultimate_dim() + 1) * num_classes(); }
    bool has_input_normalization() const { return input_scale.size() > 0; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l)
            n += static_cast<std::size_t>(layer_dims[l + 1]) * (layer_dims[l] + 1);
        return n;
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    Eigen::VectorXd parameters() const {
        Eigen::VectorXd theta(static_cast<Eigen::Index>(parameter_count()));
        Eigen::Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            RowMatrix w = weights[l];
            theta.segment(at, w.size()) = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
            at += w.size();
            theta.segment(at, biases[l].size()) = biases[l];
            at += biases[l].size();
        }
        return theta;
    }

    void set_parameters(const Eigen::VectorXd& theta) {
        require(static_cast<std::size_t>(theta.size()) == parameter_count(), ErrorKind::kDimensionMismatch,
                "parameter vector has wrong length");
        Eigen::Index at = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            const auto rows = weights[l].rows(), cols = weights[l].cols();
            weights[l] = Eigen::Map<const RowMatrix>(theta.data() + at, rows, cols);
            at += rows * cols;
            biases[l] = theta.segment(at, rows);
            at += rows;
        }
    }

    /// Final-layer block laid out class-major: [W_c,0 .. W_c,h-1, b_c] for each class c.
    Eigen::VectorXd final_layer_parameters() const {
        const int h = penultimate_dim(), k = num_classes();
        RowMatrix block(k, h + 1);
        block.leftCols(h) = weights.back();
        block.col(h) = biases.back();
        return Eigen::Map<const Eigen::VectorXd>(block.data(), block.size());
    }

    void set_final_layer_parameters(const Eigen::VectorXd& theta) {
        const int h = penultimate_dim(), k = num_classes();
        require(theta.size() == final_layer_size(), ErrorKind::kDimensionMismatch, "final-layer vector has wrong length");
        Eigen::Map<const RowMatrix> block(theta.data(), k, h + 1);
        weights.back() = block.leftCols(h);
        biases.back() = block.col(h);
    }

    friend bool operator==(const Mlp& a, const Mlp& b) {
        return a.layer_dims == b.layer_dims && a.seed == b.seed && a.parameters() == b.parameters() &&
               a.input_shift.size() == b.input_shift.size() && a.input_shift == b.input_shift &&
               a.input_scale.size() == b.input_scale.size() && a.input_scale == b.input_scale;
    }
};

struct LrDrop {
    int epoch = 0;        // applies from this (0-based) epoch on
    double factor = 0.1;  // multiplicative
};

struct TrainConfig {
    int epochs = 100;
    double learning_rate = 0.1;
    std::vector<LrDrop> lr_drops;
    double momentum = 0.9;
    int batch_size = 32;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    /// Fit input standardization on the first training call (models that already
    /// carry one keep it, so warm-started retraining sees the same feature map).
    bool standardize_inputs = true;

    double rate_at(int epoch) const {
        double lr = learning_rate;
        for (const auto& d : lr_drops)
            if (epoch >= d.epoch) lr *= d.factor;
        return lr;
    }
};

inline void validate(const TrainConfig& cfg) {
    require(cfg.epochs >= 1, ErrorKind::kInvalidArgument, "epochs must be >= 1");
    require(cfg.learning_rate > 0.0, ErrorKind::kInvalidArgument, "learning rate must be > 0");
    require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, ErrorKind::kInvalidArgument, "momentum must be in [0, 1)");
    require(cfg.batch_size >= 1, ErrorKind::kInvalidArgument, "batch size must be >= 1");
}

inline Mlp init_model(std::vector<int> layer_dims, std::uint64_t seed) {
    require(layer_dims.size() >= 2, ErrorKind::kInvalidArgument, "layer_dims needs input and output sizes");
    for (int w : layer_dims) require(w >= 1, ErrorKind::kInvalidArgument, "layer widths must be >= 1");
    require(layer_dims.back() >= 2, ErrorKind::kInvalidArgument, "need at least 2 classes");
    Mlp m;
    m.layer_dims = std::move(layer_dims);
    m.seed = seed;
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < m.layer_dims.size(); ++l) {
        const int in = m.layer_dims[l], out = m.layer_dims[l + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        Eigen::MatrixXd w(out, in);
        for (int r = 0; r < out; ++r)
            for (int c = 0; c < in; ++c) w(r, c) = u(rng);
        Eigen::VectorXd b(out);
        for (int r = 0; r < out; ++r) b[r] = u(rng);
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Forward pass

namespace detail {

inline Eigen::MatrixXd stack_features(const Mlp& m, std::span<const Sample> samples) {
    Eigen::MatrixXd x(m.input_dim(), static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        require(samples[i].features.size() == m.input_dim(), ErrorKind::kDimensionMismatch,
                "sample " + std::to_string(samples[i].id) + " has " + std::to_string(samples[i].features.size()) +
                    " features, model expects " + std::to_string(m.input_dim()));
        x.col(static_cast<Eigen::Index>(i)) = samples[i].features;
    }
    return x;
}

inline void normalize_inputs(const Mlp& m, Eigen::MatrixXd& x) {
    if (!m.has_input_normalization()) return;
    x.colwise() -= m.input_shift;
    x.array().colwise() /= m.input_scale.array();
}

/// Column-wise softmax, numerically stabilized.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd p = logits;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const double mx = p.col(j).maxCoeff();
        p.col(j) = (p.col(j).array() - mx).exp();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

}  // namespace detail

/// Features entering the final layer, one column per input column.
inline Eigen::MatrixXd penultimate_batch(const Mlp& m, Eigen::MatrixXd x) {
    detail::normalize_inputs(m, x);
    for (std::size_t l = 0; l + 1 < m.num_layers(); ++l) {
        x = (m.weights[l] * x).colwise() + m.biases[l];
        x = x.cwiseMax(0.0);
    }
    return x;
}

inline Eigen::MatrixXd penultimate_batch(const Mlp& m, std::span<const Sample> samples) {
    return penultimate_batch(m, detail::stack_features(m, samples));
}

inline Eigen::MatrixXd logits_from_penultimate(const Mlp& m, const Eigen::MatrixXd& features) {
    return (m.weights.back() * features).colwise() + m.biases.back();
}

/// Class probabilities, one column per sample.
inline Eigen::MatrixXd predict_batch(const Mlp& m, std::span<const Sample> samples) {
    return detail::softmax_columns(logits_from_penultimate(m, penultimate_batch(m, samples)));
}

inline Eigen::MatrixXd predict_batch(const Mlp& m, const Eigen::MatrixXd& x) {
    return detail::softmax_columns(logits_from_penultimate(m, penultimate_batch(m, x)));
}

inline Eigen::VectorXd predict(const Mlp& m, const Eigen::VectorXd& x) {
    require(x.size() == m.input_dim(), ErrorKind::kDimensionMismatch, "input has wrong dimension");
    Eigen::MatrixXd col = x;
    return predict_batch(m, col).col(0);
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax(const Eigen::Ref<const Eigen::VectorXd>& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

enum class LabelSource { kObserved, kTrue };

inline double accuracy(const Mlp& m, std::span<const Sample> samples, LabelSource source = LabelSource::kObserved) {
    if (samples.empty()) return 0.0;
    const Eigen::MatrixXd p = predict_batch(m, samples);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        int target = samples[i].label;
        if (source == LabelSource::kTrue) {
            require(samples[i].true_label.has_value(), ErrorKind::kMissingTrueLabel,
                    "sample " + std::to_string(samples[i].id) + " has no true label");
            target = *samples[i].true_label;
        }
        if (argmax(p.col(static_cast<Eigen::Index>(i))) == target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

inline double accuracy(const Mlp& m, const LabeledDataset& ds, LabelSource source = LabelSource::kObserved) {
    return accuracy(m, ds.samples(), source);
}

/// Per-sample cross-entropy against the observed label.
inline Eigen::VectorXd sample_losses(const Mlp& m, std::span<const Sample> samples) {
    const Eigen::MatrixXd p = predict_batch(m, samples);
    Eigen::VectorXd loss(static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i)
        loss[static_cast<Eigen::Index>(i)] = -std::log(std::max(p(samples[i].label, static_cast<Eigen::Index>(i)), 1e-300));
    return loss;
}

inline double mean_loss(const Mlp& m, std::span<const Sample> samples) {
    return samples.empty() ? 0.0 : sample_losses(m, samples).mean();
}

// ---------------------------------------------------------------------------
// Training

inline void fit_input_normalization(Mlp& m, const LabeledDataset& ds) {
    const Eigen::MatrixXd x = detail::stack_features(m, ds.samples());
    m.input_shift = x.rowwise().mean();
    m.input_scale = ((x.colwise() - m.input_shift).array().square().rowwise().mean()).sqrt().matrix();
    for (Eigen::Index j = 0; j < m.input_scale.size(); ++j)
        if (!(m.input_scale[j] > 1e-12)) m.input_scale[j] = 1.0;
}

/// Mini-batch SGD with (heavy-ball) momentum on mean cross-entropy. Shuffle
/// order comes from cfg.seed, so identical calls give identical parameters.
/// When `epoch_losses` is given, the mean training loss after each epoch is appended.
inline Mlp train(Mlp m, const LabeledDataset& ds, const TrainConfig& cfg, std::vector<double>* epoch_losses = nullptr) {
    validate(cfg);
    require(!ds.empty(), ErrorKind::kInsufficientData, "cannot train on an empty dataset");
    require(ds.feature_dim() == m.input_dim(), ErrorKind::kDimensionMismatch,
            "dataset has " + std::to_string(ds.feature_dim()) + " features, model expects " +
                std::to_string(m.input_dim()));
    require(ds.num_classes() == m.num_classes(), ErrorKind::kDimensionMismatch,
            "dataset has " + std::to_string(ds.num_classes()) + " classes, model outputs " +
                std::to_string(m.num_classes()));
    if (cfg.standardize_inputs && !m.has_input_normalization()) fit_input_normalization(m, ds);

    Eigen::MatrixXd x_all = detail::stack_features(m, ds.samples());
    detail::normalize_inputs(m, x_all);
    const auto n = static_cast<Eigen::Index>(ds.size());
    const std::size_t layers = m.num_layers();

    std::vector<Eigen::MatrixXd> vel_w(layers);
    std::vector<Eigen::VectorXd> vel_b(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        vel_w[l] = Eigen::MatrixXd::Zero(m.weights[l].rows(), m.weights[l].cols());
        vel_b[l] = Eigen::VectorXd::Zero(m.biases[l].size());
    }

    Rng rng(cfg.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::vector<Eigen::MatrixXd> acts(layers + 1);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.rate_at(epoch);
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const Eigen::Index bs = std::min<Eigen::Index>(cfg.batch_size, n - start);
            acts[0].resize(x_all.rows(), bs);
            Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(m.num_classes(), bs);
            for (Eigen::Index j = 0; j < bs; ++j) {
                const Eigen::Index idx = order[static_cast<std::size_t>(start + j)];
                acts[0].col(j) = x_all.col(idx);
                onehot(ds[static_cast<std::size_t>(idx)].label, j) = 1.0;
            }
            for (std::size_t l = 0; l < layers; ++l) {
                acts[l + 1] = (m.weights[l] * acts[l]).colwise() + m.biases[l];
                if (l + 1 < layers) acts[l + 1] = acts[l + 1].cwiseMax(0.0);
            }
            Eigen::MatrixXd delta = (detail::softmax_columns(acts[layers]) - onehot) / static_cast<double>(bs);
            for (std::size_t l = layers; l-- > 0;) {
                Eigen::MatrixXd grad_w = delta * acts[l].transpose();
                Eigen::VectorXd grad_b = delta.rowwise().sum();
                if (l > 0) {
                    delta = m.weights[l].transpose() * delta;
                    delta = delta.cwiseProduct((acts[l].array() > 0.0).cast<double>().matrix());
                }
                if (cfg.weight_decay > 0.0) {
                    grad_w += cfg.weight_decay * m.weights[l];
                    grad_b += cfg.weight_decay * m.biases[l];
                }
                vel_w[l] = cfg.momentum * vel_w[l] + grad_w;
                vel_b[l] = cfg.momentum * vel_b[l] + grad_b;
                m.weights[l] -= lr * vel_w[l];
                m.biases[l] -= lr * vel_b[l];
            }
        }
        if (epoch_losses) epoch_losses->push_back(mean_loss(m, ds.samples()));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Final-layer gradient and Hessian

/// Gradient of the cross-entropy at `sample` w.r.t. the final-layer block,
/// with the penultimate features held fixed. Layout matches final_layer_parameters().
inline Eigen::VectorXd final_layer_grad_from(const Eigen::Ref<const Eigen::VectorXd>& features,
                                             const Eigen::Ref<const Eigen::VectorXd>& probs, int label) {
    const auto h = features.size(), k = probs.size();
    Eigen::VectorXd residual = probs;
    residual[label] -= 1.0;
    Eigen::VectorXd g(k * (h + 1));
    for (Eigen::Index c = 0; c < k; ++c) {
        g.segment(c * (h + 1), h) = residual[c] * features;
        g[c * (h + 1) + h] = residual[c];
    }
    return g;
}

inline Eigen::VectorXd final_layer_grad(const Mlp& m, const Sample& sample) {
    const std::span<const Sample> one(&sample, 1);
    const Eigen::MatrixXd a = penultimate_batch(m, one);
    const Eigen::MatrixXd p = detail::softmax_columns(logits_from_penultimate(m, a));
    return final_layer_grad_from(a.col(0), p.col(0), sample.label);
}

/// Final-layer gradients for a batch, one column per sample.
inline Eigen::MatrixXd final_layer_grads(const Mlp& m, std::span<const Sample> samples) {
    const Eigen::MatrixXd a = penultimate_batch(m, samples);
    const Eigen::MatrixXd p = detail::softmax_columns(logits_from_penultimate(m, a));
    Eigen::MatrixXd g(m.final_layer_size(), static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto j = static_cast<Eigen::Index>(i);
        g.col(j) = final_layer_grad_from(a.col(j), p.col(j), samples[i].label);
    }
    return g;
}

/// Damped empirical Hessian of mean cross-entropy over a sample subset,
/// restricted to the final layer and applied matrix-free:
///   H v = (1/n) sum_i [(diag(p_i) - p_i p_i^T) V a_i] a_i^T + damping * v
/// where V is v reshaped to K x (h+1) and a_i is the features with a trailing 1.
class HessianOperator {
public:
    HessianOperator() = default;

    HessianOperator(const Mlp& m, std::span<const Sample> subset, double damping) : damping_(damping) {
        require(!subset.empty(), ErrorKind::kInsufficientData, "Hessian subset must be nonempty");
        require(damping >= 0.0, ErrorKind::kInvalidArgument, "damping must be >= 0");
        const Eigen::MatrixXd a = penultimate_batch(m, subset);
        probs_ = detail::softmax_columns(logits_from_penultimate(m, a)).transpose();
        features_.resize(a.cols(), a.rows() + 1);
        features_.leftCols(a.rows()) = a.transpose();
        features_.col(a.rows()).setOnes();
        classes_ = m.num_classes();
    }

    Eigen::Index dim() const { return classes_ * features_.cols(); }
    double damping() const { return damping_; }
    std::size_t subset_size() const { return static_cast<std::size_t>(features_.rows()); }

    HessianOperator with_damping(double damping) const {
        HessianOperator copy = *this;
        copy.damping_ = damping;
        return copy;
    }

    Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
        require(v.size() == dim(), ErrorKind::kDimensionMismatch, "Hessian operand has wrong length");
        const Eigen::Index width = features_.cols();
        Eigen::Map<const RowMatrix> vmat(v.data(), classes_, width);
        const Eigen::MatrixXd u = features_ * vmat.transpose();  // n x K, row i = V a_i
        const Eigen::VectorXd pu = (probs_.array() * u.array()).rowwise().sum();
        const Eigen::MatrixXd g = probs_.array() * (u.colwise() - pu).array();
        RowMatrix out = (g.transpose() * features_) / static_cast<double>(features_.rows());
        out += damping_ * vmat;
        return Eigen::Map<const Eigen::VectorXd>(out.data(), out.size());
    }

private:
    Eigen::MatrixXd features_;  // n x (h+1)
    Eigen::MatrixXd probs_;     // n x K
    Eigen::Index classes_ = 0;
    double damping_ = 0.0;
};

inline HessianOperator final_layer_hessian(const Mlp& m, std::span<const Sample> subset, double damping = 0.01) {
    return HessianOperator(m, subset, damping);
}

/// Uniform subset without replacement of at most `max_size` samples, in id order.
inline std::vector<Sample> sample_subset(const LabeledDataset& ds, std::size_t max_size, std::uint64_t seed) {
    std::vector<Sample> all(ds.begin(), ds.end());
    if (all.size() <= max_size) return all;
    Rng rng(seed);
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_size);
    std::sort(idx.begin(), idx.end());
    std::vector<Sample> out;
    out.reserve(max_size);
    for (std::size_t i : idx) out.push_back(all[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints (JSON; doubles are written with round-trip precision)

inline nlohmann::json to_json(const Mlp& m) {
    const Eigen::VectorXd theta = m.parameters();
    return nlohmann::json{
        {"format", "infrank-model"},
        {"version", 1},
        {"layer_dims", m.layer_dims},
        {"seed", m.seed},
        {"input_shift", std::vector<double>(m.input_shift.data(), m.input_shift.data() + m.input_shift.size())},
        {"input_scale", std::vector<double>(m.input_scale.data(), m.input_scale.data() + m.input_scale.size())},
        {"parameters", std::vector<double>(theta.data(), theta.data() + theta.size())},
    };
}

inline Mlp model_from_json(const nlohmann::json& j) {
    try {
        require(j.at("format") == "infrank-model" && j.at("version") == 1, ErrorKind::kConfig,
                "unsupported checkpoint format");
        Mlp m = init_model(j.at("layer_dims").get<std::vector<int>>(), j.at("seed").get<std::uint64_t>());
        const auto theta = j.at("parameters").get<std::vector<double>>();
        m.set_parameters(Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size())));
        const auto shift = j.at("input_shift").get<std::vector<double>>();
        const auto scale = j.at("input_scale").get<std::vector<double>>();
        require(shift.size() == scale.size() && (shift.empty() || static_cast<int>(shift.size()) == m.input_dim()),
                ErrorKind::kDimensionMismatch, "checkpoint input normalization has wrong length");
        m.input_shift = Eigen::Map<const Eigen::VectorXd>(shift.data(), static_cast<Eigen::Index>(shift.size()));
        m.input_scale = Eigen::Map<const Eigen::VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kConfig, std::string("bad checkpoint: ") + e.what());
    }
}

inline void save_model(const Mlp& m, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
    os << to_json(m).dump() << '\n';
}

inline Mlp load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::kIo, "cannot open " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
    }
    return model_from_json(j);
}

}  // namespace infrank
