#pragma once

// Influence of training samples on the final-layer parameters, -H^{-1} grad,
// and on validation losses, grad_t^T (-H^{-1} grad_i). Inverse-Hessian-vector
// products come from a matrix-free conjugate-gradient solve.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <exception>
#include <map>
#include <ostream>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "infrank/classifier.hpp"
#include "infrank/dataset.hpp"
#include "infrank/error.hpp"

namespace infrank {

template <class Op>
concept LinearOperator = requires(const Op& op, const Eigen::VectorXd& v) {
    { op.apply(v) } -> std::convertible_to<Eigen::VectorXd>;
    { op.dim() } -> std::convertible_to<Eigen::Index>;
};

/// Dense symmetric matrix as a LinearOperator.
struct DenseOperator {
    Eigen::MatrixXd matrix;
    Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return matrix * v; }
    Eigen::Index dim() const { return matrix.rows(); }
};

struct CgOptions {
    double tol = 1e-6;
    std::size_t max_iter = 0;  // 0 means 10 * dim
};

struct CgResult {
    Eigen::VectorXd x;
    double relative_residual = 0.0;  // ||H x - b|| / ||b||, recomputed from x
    std::size_t iterations = 0;
    bool converged = false;
};

struct NoIterateCallback {
    void operator()(std::size_t, const Eigen::VectorXd&) const {}
};

/// Conjugate gradient for a symmetric positive-definite operator. The loop
/// stops on the recursive residual, then re-checks the true residual and
/// restarts from the current iterate if drift left it above tolerance.
/// `on_iterate(k, x_k)` is called after every update.
template <LinearOperator Op, class Callback = NoIterateCallback>
CgResult cg_solve(const Op& op, const Eigen::VectorXd& b, CgOptions opts = {}, Callback&& on_iterate = {}) {
    require(opts.tol > 0.0, ErrorKind::kInvalidArgument, "CG tolerance must be > 0");
    require(b.size() == op.dim(), ErrorKind::kDimensionMismatch, "CG right-hand side has wrong length");
    const std::size_t max_iter = opts.max_iter ? opts.max_iter : 10 * static_cast<std::size_t>(op.dim());
    CgResult res;
    res.x = Eigen::VectorXd::Zero(b.size());
    const double b_norm = b.norm();
    require(std::isfinite(b_norm), ErrorKind::kNumerical, "non-finite right-hand side");
    if (b_norm == 0.0) {
        res.converged = true;
        return res;
    }

    const double target = opts.tol * b_norm;
    Eigen::VectorXd r = b;
    while (true) {
        Eigen::VectorXd p = r;
        double rr = r.squaredNorm();
        while (std::sqrt(rr) > target && res.iterations < max_iter) {
            const Eigen::VectorXd hp = op.apply(p);
            const double curvature = p.dot(hp);
            if (!std::isfinite(curvature) || curvature <= 0.0)
                throw Error(ErrorKind::kNumerical, "CG met non-positive or non-finite curvature");
            const double alpha = rr / curvature;
            res.x += alpha * p;
            r -= alpha * hp;
            const double rr_next = r.squaredNorm();
            if (!std::isfinite(rr_next)) throw Error(ErrorKind::kNumerical, "CG residual became non-finite");
            p = r + (rr_next / rr) * p;
            rr = rr_next;
            ++res.iterations;
            on_iterate(res.iterations, res.x);
        }
        r = b - op.apply(res.x);
        res.relative_residual = r.norm() / b_norm;
        res.converged = res.relative_residual <= opts.tol;
        if (res.converged || res.iterations >= max_iter) break;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Influence on the model

struct InfluenceVector {
    SampleId sample_id = 0;
    Eigen::VectorXd vector;  // -H^{-1} grad, final-layer layout
    double cg_residual = 0.0;
    bool converged = true;
    double damping = 0.0;  // damping actually used (raised on breakdown)

    double norm() const { return vector.norm(); }
};

/// -H^{-1} g for a precomputed gradient. On numerical breakdown the solve is
/// retried once with ten times the damping.
inline InfluenceVector influence_from_gradient(SampleId id, const Eigen::VectorXd& grad, const HessianOperator& h,
                                               CgOptions opts = {}) {
    InfluenceVector out;
    out.sample_id = id;
    CgResult res;
    try {
        res = cg_solve(h, grad, opts);
        out.damping = h.damping();
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNumerical) throw;
        const double raised = h.damping() > 0.0 ? 10.0 * h.damping() : 1e-3;
        res = cg_solve(h.with_damping(raised), grad, opts);
        out.damping = raised;
    }
    out.vector = -res.x;
    out.cg_residual = res.relative_residual;
    out.converged = res.converged;
    return out;
}

inline InfluenceVector influence_on_model(const Mlp& m, const Sample& sample, const HessianOperator& h,
                                          CgOptions opts = {}) {
    return influence_from_gradient(sample.id, final_layer_grad(m, sample), h, opts);
}

/// Influence of a bag of instances sharing one label (e.g. frames of a video),
/// whose loss is the mean of its members' losses.
inline InfluenceVector bag_influence(const Mlp& m, std::span<const Sample> bag, const HessianOperator& h,
                                     CgOptions opts = {}) {
    require(!bag.empty(), ErrorKind::kInsufficientData, "bag must be nonempty");
    for (const auto& s : bag)
        require(s.label == bag.front().label, ErrorKind::kMixedBagLabels,
                "bag members carry different labels (" + std::to_string(bag.front().label) + " vs " +
                    std::to_string(s.label) + ")");
    const Eigen::VectorXd mean_grad = final_layer_grads(m, bag).rowwise().mean();
    return influence_from_gradient(bag.front().id, mean_grad, h, opts);
}

/// Runs f(i) for i in [0, n) over `threads` workers with a static partition.
/// The first exception (lowest index range) is rethrown after all workers join.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const std::size_t chunk = (n + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i) f(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Influence vectors for every sample, in input order.
inline std::vector<InfluenceVector> influence_on_model_all(const Mlp& m, std::span<const Sample> samples,
                                                           const HessianOperator& h, CgOptions opts = {},
                                                           unsigned threads = 1) {
    const Eigen::MatrixXd grads = final_layer_grads(m, samples);
    std::vector<InfluenceVector> out(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        out[i] = influence_from_gradient(samples[i].id, grads.col(static_cast<Eigen::Index>(i)), h, opts);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Influence on validation data

struct InfluenceOnData {
    SampleId train_id = 0;
    std::map<SampleId, double> values;  // validation id -> grad_t^T I_M(train)
};

/// One solve per training sample, then a dot product per validation sample;
/// equivalent to solving on the validation side because H^{-1} is symmetric.
inline InfluenceOnData influence_on_data(const InfluenceVector& im, std::span<const Sample> val,
                                         const Eigen::MatrixXd& val_grads) {
    require(val_grads.cols() == static_cast<Eigen::Index>(val.size()) && val_grads.rows() == im.vector.size(),
            ErrorKind::kDimensionMismatch, "validation gradients do not match");
    InfluenceOnData out;
    out.train_id = im.sample_id;
    const Eigen::VectorXd dots = val_grads.transpose() * im.vector;
    for (std::size_t t = 0; t < val.size(); ++t) {
        const double v = dots[static_cast<Eigen::Index>(t)];
        require(std::isfinite(v), ErrorKind::kNumerical, "non-finite influence on data");
        out.values[val[t].id] = v;
    }
    return out;
}

inline InfluenceOnData influence_on_data(const Mlp& m, const Sample& train_sample, std::span<const Sample> val,
                                         const HessianOperator& h, CgOptions opts = {}) {
    require(!val.empty(), ErrorKind::kInsufficientData, "need at least one validation sample");
    return influence_on_data(influence_on_model(m, train_sample, h, opts), val, final_layer_grads(m, val));
}

// ---------------------------------------------------------------------------
// Dumps

inline void write_influence_norms_csv(std::ostream& os, std::span<const InfluenceVector> vectors) {
    os << "train_id,norm_im,cg_residual\n";
    for (const auto& v : vectors)
        os << v.sample_id << ',' << detail::format_double(v.norm()) << ',' << detail::format_double(v.cg_residual) << '\n';
}

inline void write_influence_on_data_csv(std::ostream& os, std::span<const InfluenceOnData> table) {
    os << "train_id,val_id,i_d\n";
    for (const auto& row : table)
        for (const auto& [val_id, v] : row.values)
            os << row.train_id << ',' << val_id << ',' << detail::format_double(v) << '\n';
}

}  // namespace infrank
