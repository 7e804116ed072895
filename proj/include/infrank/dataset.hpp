#pragma once

// Labeled datasets: generators, symmetric label noise, clean validation
// splits, and CSV / manifest persistence.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "infrank/error.hpp"
#include "infrank/random.hpp"

namespace infrank {

using SampleId = std::int64_t;

struct Sample {
    SampleId id = 0;
    Eigen::VectorXd features;
    int label = 0;                  // observed (possibly noisy)
    std::optional<int> true_label;  // known only for synthetic or audited data
    bool trusted = false;           // eligible for the clean validation split

    bool is_flipped() const { return true_label && *true_label != label; }

    friend bool operator==(const Sample& a, const Sample& b) {
        return a.id == b.id && a.label == b.label && a.true_label == b.true_label &&
               a.trusted == b.trusted && a.features.size() == b.features.size() &&
               a.features == b.features;
    }
};

/// Ordered-by-id collection of samples sharing one feature dimension.
class LabeledDataset {
public:
    LabeledDataset() = default;

    LabeledDataset(std::vector<Sample> samples, int num_classes, int feature_dim)
        : samples_(std::move(samples)), num_classes_(num_classes), feature_dim_(feature_dim) {
        require(num_classes_ >= 2, ErrorKind::kInvalidArgument, "num_classes must be >= 2");
        require(feature_dim_ >= 1, ErrorKind::kInvalidArgument, "feature_dim must be >= 1");
        std::sort(samples_.begin(), samples_.end(),
                  [](const Sample& a, const Sample& b) { return a.id < b.id; });
        for (std::size_t i = 0; i < samples_.size(); ++i) {
            const Sample& s = samples_[i];
            if (i > 0 && samples_[i - 1].id == s.id)
                throw Error(ErrorKind::kInvalidArgument, "duplicate sample id " + std::to_string(s.id));
            if (s.features.size() != feature_dim_)
                throw Error(ErrorKind::kDimensionMismatch,
                            "sample " + std::to_string(s.id) + " has " + std::to_string(s.features.size()) +
                                " features, expected " + std::to_string(feature_dim_));
            check_label(s.label, s.id);
            if (s.true_label) check_label(*s.true_label, s.id);
        }
    }

    std::span<const Sample> samples() const { return samples_; }
    std::size_t size() const { return samples_.size(); }
    bool empty() const { return samples_.empty(); }
    int num_classes() const { return num_classes_; }
    int feature_dim() const { return feature_dim_; }
    const Sample& operator[](std::size_t i) const { return samples_[i]; }
    auto begin() const { return samples_.begin(); }
    auto end() const { return samples_.end(); }

    const Sample* find(SampleId id) const {
        auto it = std::lower_bound(samples_.begin(), samples_.end(), id,
                                   [](const Sample& s, SampleId v) { return s.id < v; });
        return (it != samples_.end() && it->id == id) ? &*it : nullptr;
    }

    bool has_true_labels() const {
        return std::all_of(samples_.begin(), samples_.end(), [](const Sample& s) { return s.true_label.has_value(); });
    }

    std::vector<SampleId> ids() const {
        std::vector<SampleId> out;
        out.reserve(samples_.size());
        for (const auto& s : samples_) out.push_back(s.id);
        return out;
    }

    /// Copy without the given ids (unknown ids are ignored).
    LabeledDataset without(const std::set<SampleId>& removed) const {
        std::vector<Sample> kept;
        kept.reserve(samples_.size());
        for (const auto& s : samples_)
            if (!removed.count(s.id)) kept.push_back(s);
        return LabeledDataset(std::move(kept), num_classes_, feature_dim_);
    }

    /// Copy with extra samples appended; ids must not collide.
    LabeledDataset with(std::span<const Sample> extra) const {
        std::vector<Sample> all = samples_;
        all.insert(all.end(), extra.begin(), extra.end());
        return LabeledDataset(std::move(all), num_classes_, feature_dim_);
    }

    friend bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
        return a.num_classes_ == b.num_classes_ && a.feature_dim_ == b.feature_dim_ && a.samples_ == b.samples_;
    }

private:
    void check_label(int label, SampleId id) const {
        if (label < 0 || label >= num_classes_)
            throw Error(ErrorKind::kLabelOutOfRange, "sample " + std::to_string(id) + " has label " +
                                                         std::to_string(label) + " outside [0, " +
                                                         std::to_string(num_classes_) + ")");
    }

    std::vector<Sample> samples_;
    int num_classes_ = 2;
    int feature_dim_ = 1;
};

/// Clean, per-class validation samples; every present class holds exactly m.
struct ValidationSet {
    std::map<int, std::vector<Sample>> per_class;
    int per_class_count = 0;

    std::vector<Sample> all() const {
        std::vector<Sample> out;
        for (const auto& [k, v] : per_class) out.insert(out.end(), v.begin(), v.end());
        return out;
    }
    std::size_t size() const { return per_class.size() * static_cast<std::size_t>(per_class_count); }
};

struct NoiseSpec {
    double ratio = 0.0;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Generators

/// Parabolic 2-D toy problem: x1 ~ U(-5,5), x2 ~ U(0,55), y = [x2 >= 3 x1^2].
inline int toy_rule(double x1, double x2) { return x2 >= 3.0 * x1 * x1 ? 1 : 0; }

inline LabeledDataset generate_toy(std::size_t n, std::uint64_t seed) {
    require(n >= 2, ErrorKind::kInvalidArgument, "toy dataset needs n >= 2");
    Rng rng(seed);
    std::uniform_real_distribution<double> u1(-5.0, 5.0), u2(0.0, 55.0);
    std::vector<Sample> samples(n);
    for (std::size_t i = 0; i < n; ++i) {
        Sample& s = samples[i];
        s.id = static_cast<SampleId>(i);
        s.features.resize(2);
        s.features[0] = u1(rng);
        s.features[1] = u2(rng);
        s.label = toy_rule(s.features[0], s.features[1]);
        s.true_label = s.label;
    }
    return LabeledDataset(std::move(samples), 2, 2);
}

/// Mean of blob class c: points on a circle in the first two coordinates with
/// adjacent centres exactly `separation` apart (on a line when d == 1).
inline Eigen::VectorXd blob_center(int c, int num_classes, int d, double separation) {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    if (d == 1) {
        mu[0] = separation * (c - 0.5 * (num_classes - 1));
        return mu;
    }
    const double radius = separation / (2.0 * std::sin(std::numbers::pi / num_classes));
    const double angle = 2.0 * std::numbers::pi * c / num_classes;
    mu[0] = radius * std::cos(angle);
    mu[1] = radius * std::sin(angle);
    return mu;
}

inline LabeledDataset generate_blobs(std::size_t n_per_class, int num_classes, int d, double separation,
                                     std::uint64_t seed) {
    require(num_classes >= 2, ErrorKind::kInvalidArgument, "blobs need K >= 2");
    require(d >= 1, ErrorKind::kInvalidArgument, "blobs need d >= 1");
    require(separation > 0.0, ErrorKind::kInvalidArgument, "blobs need separation > 0");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Sample> samples;
    samples.reserve(n_per_class * static_cast<std::size_t>(num_classes));
    SampleId next = 0;
    for (int c = 0; c < num_classes; ++c) {
        const Eigen::VectorXd mu = blob_center(c, num_classes, d, separation);
        for (std::size_t i = 0; i < n_per_class; ++i) {
            Sample s;
            s.id = next++;
            s.features.resize(d);
            for (int j = 0; j < d; ++j) s.features[j] = mu[j] + normal(rng);
            s.label = c;
            s.true_label = c;
            samples.push_back(std::move(s));
        }
    }
    return LabeledDataset(std::move(samples), num_classes, d);
}

/// Number of labels flipped for ratio eps over n samples: floor(eps * n).
/// The 1e-9 slack absorbs products like 0.29 * 100 = 28.999999999999996.
inline std::size_t noise_flip_count(double ratio, std::size_t n) {
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

/// Symmetric label noise: exactly floor(eps * n) samples, chosen uniformly
/// without replacement, move to a uniformly drawn different class.
inline LabeledDataset inject_noise(const LabeledDataset& ds, const NoiseSpec& spec) {
    require(spec.ratio >= 0.0 && spec.ratio <= 1.0, ErrorKind::kInvalidArgument, "noise ratio must be in [0, 1]");
    require(ds.has_true_labels(), ErrorKind::kMissingTrueLabel, "noise injection needs true labels on every sample");
    std::vector<Sample> samples(ds.begin(), ds.end());
    const std::size_t flips = noise_flip_count(spec.ratio, samples.size());
    if (flips == 0) return ds;

    Rng rng(spec.seed);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // partial Fisher-Yates: the first `flips` slots are a uniform draw without replacement
    for (std::size_t i = 0; i < flips; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    std::uniform_int_distribution<int> other(0, ds.num_classes() - 2);
    for (std::size_t i = 0; i < flips; ++i) {
        Sample& s = samples[order[i]];
        int target = other(rng);
        if (target >= *s.true_label) ++target;
        s.label = target;
    }
    return LabeledDataset(std::move(samples), ds.num_classes(), ds.feature_dim());
}

/// Moves m clean samples per class into a validation set. A sample is clean
/// when its true label is known and matches, or when it is flagged trusted.
inline std::pair<LabeledDataset, ValidationSet> split_validation(const LabeledDataset& ds, int m,
                                                                 std::uint64_t seed) {
    require(m >= 1, ErrorKind::kInvalidArgument, "validation count per class must be >= 1");
    Rng rng(seed);
    ValidationSet val;
    val.per_class_count = m;
    std::set<SampleId> taken;
    for (int k = 0; k < ds.num_classes(); ++k) {
        std::vector<const Sample*> pool;
        for (const auto& s : ds) {
            const bool clean = s.true_label ? *s.true_label == s.label : s.trusted;
            if (clean && s.label == k) pool.push_back(&s);
        }
        if (pool.size() < static_cast<std::size_t>(m))
            throw Error(ErrorKind::kInsufficientData, "class " + std::to_string(k) + " has only " +
                                                          std::to_string(pool.size()) + " clean samples, need " +
                                                          std::to_string(m));
        std::shuffle(pool.begin(), pool.end(), rng);
        pool.resize(m);
        std::sort(pool.begin(), pool.end(), [](const Sample* a, const Sample* b) { return a->id < b->id; });
        auto& bucket = val.per_class[k];
        for (const Sample* s : pool) {
            bucket.push_back(*s);
            taken.insert(s->id);
        }
    }
    return {ds.without(taken), std::move(val)};
}

// ---------------------------------------------------------------------------
// CSV: id,f0,...,f{d-1},label[,true_label][,trusted]

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, end);
}

inline std::vector<std::string_view> split_row(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t comma = line.find(',', start);
        std::string_view field = line.substr(start, comma - start);
        while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
        while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
            field.remove_suffix(1);
        out.push_back(field);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T>
bool parse_number(std::string_view text, T& out) {
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    return ec == std::errc() && ptr == text.data() + text.size();
}

}  // namespace detail

inline void write_csv(std::ostream& os, const LabeledDataset& ds) {
    const bool with_truth = std::any_of(ds.begin(), ds.end(), [](const Sample& s) { return s.true_label.has_value(); });
    const bool with_trusted = std::any_of(ds.begin(), ds.end(), [](const Sample& s) { return s.trusted; });
    os << "id";
    for (int j = 0; j < ds.feature_dim(); ++j) os << ",f" << j;
    os << ",label";
    if (with_truth) os << ",true_label";
    if (with_trusted) os << ",trusted";
    os << '\n';
    for (const auto& s : ds) {
        os << s.id;
        for (int j = 0; j < ds.feature_dim(); ++j) os << ',' << detail::format_double(s.features[j]);
        os << ',' << s.label;
        if (with_truth) {
            os << ',';
            if (s.true_label) os << *s.true_label;
        }
        if (with_trusted) os << ',' << (s.trusted ? 1 : 0);
        os << '\n';
    }
}

inline void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
    write_csv(os, ds);
    require(static_cast<bool>(os), ErrorKind::kIo, "write failed for " + path.string());
}

inline LabeledDataset read_csv(std::istream& is, int num_classes, const std::string& source = "<stream>") {
    std::string line;
    if (!std::getline(is, line)) throw Error(ErrorKind::kMalformedRow, source + ": missing header");
    const auto header = detail::split_row(line);
    if (header.size() < 3 || header[0] != "id")
        throw Error(ErrorKind::kMalformedRow, source + ": header must start with id,f0,...,label");
    std::size_t label_col = 0;
    for (std::size_t c = 1; c < header.size(); ++c)
        if (header[c] == "label") { label_col = c; break; }
    if (label_col < 2) throw Error(ErrorKind::kMalformedRow, source + ": header needs at least one feature column and label");
    const int d = static_cast<int>(label_col - 1);
    for (int j = 0; j < d; ++j)
        if (header[1 + j] != "f" + std::to_string(j))
            throw Error(ErrorKind::kMalformedRow, source + ": expected column f" + std::to_string(j));
    std::optional<std::size_t> truth_col, trusted_col;
    for (std::size_t c = label_col + 1; c < header.size(); ++c) {
        if (header[c] == "true_label") truth_col = c;
        else if (header[c] == "trusted") trusted_col = c;
        else throw Error(ErrorKind::kMalformedRow, source + ": unknown column " + std::string(header[c]));
    }

    std::vector<Sample> samples;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        const auto fields = detail::split_row(line);
        const std::string where = source + ":" + std::to_string(line_no);
        if (fields.size() != header.size()) {
            throw Error(ErrorKind::kDimensionMismatch,
                        where + ": expected " + std::to_string(header.size()) + " fields, got " +
                            std::to_string(fields.size()));
        }
        Sample s;
        if (!detail::parse_number(fields[0], s.id)) throw Error(ErrorKind::kMalformedRow, where + ": bad id");
        s.features.resize(d);
        for (int j = 0; j < d; ++j) {
            double v = 0.0;
            if (!detail::parse_number(fields[1 + j], v) || !std::isfinite(v))
                throw Error(ErrorKind::kMalformedRow, where + ": bad feature f" + std::to_string(j));
            s.features[j] = v;
        }
        if (!detail::parse_number(fields[label_col], s.label))
            throw Error(ErrorKind::kMalformedRow, where + ": bad label");
        if (s.label < 0 || s.label >= num_classes)
            throw Error(ErrorKind::kLabelOutOfRange, where + ": label " + std::to_string(s.label));
        if (truth_col && !fields[*truth_col].empty()) {
            int t = 0;
            if (!detail::parse_number(fields[*truth_col], t)) throw Error(ErrorKind::kMalformedRow, where + ": bad true_label");
            if (t < 0 || t >= num_classes) throw Error(ErrorKind::kLabelOutOfRange, where + ": true_label " + std::to_string(t));
            s.true_label = t;
        }
        if (trusted_col) {
            int flag = 0;
            if (!detail::parse_number(fields[*trusted_col], flag) || (flag != 0 && flag != 1))
                throw Error(ErrorKind::kMalformedRow, where + ": trusted must be 0 or 1");
            s.trusted = flag == 1;
        }
        samples.push_back(std::move(s));
    }
    return LabeledDataset(std::move(samples), num_classes, d);
}

inline LabeledDataset load_csv(const std::filesystem::path& path, int num_classes) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::kIo, "cannot open " + path.string());
    return read_csv(is, num_classes, path.string());
}

// ---------------------------------------------------------------------------
// Manifest: {num_classes, feature_dim, path, noise_spec?}

struct DatasetManifest {
    int num_classes = 2;
    int feature_dim = 1;
    std::string path;  // relative to the manifest's directory unless absolute
    std::optional<NoiseSpec> noise_spec;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json j{{"num_classes", m.num_classes}, {"feature_dim", m.feature_dim}, {"path", m.path}};
    if (m.noise_spec) j["noise_spec"] = {{"kind", "symmetric"}, {"ratio", m.noise_spec->ratio}, {"seed", m.noise_spec->seed}};
    return j;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
    os << to_json(m).dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::kIo, "cannot open " + path.string());
    DatasetManifest m;
    try {
        const auto j = nlohmann::json::parse(is);
        m.num_classes = j.at("num_classes").get<int>();
        m.feature_dim = j.at("feature_dim").get<int>();
        m.path = j.at("path").get<std::string>();
        if (j.contains("noise_spec")) {
            const auto& n = j["noise_spec"];
            if (n.value("kind", "symmetric") != "symmetric")
                throw Error(ErrorKind::kConfig, path.string() + ": only symmetric noise is supported");
            m.noise_spec = NoiseSpec{n.at("ratio").get<double>(), n.at("seed").get<std::uint64_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
    }
    return m;
}

/// Loads the CSV a manifest points at and checks its declared shape.
inline LabeledDataset load_dataset(const std::filesystem::path& manifest_path) {
    const DatasetManifest m = load_manifest(manifest_path);
    std::filesystem::path csv = m.path;
    if (csv.is_relative()) csv = manifest_path.parent_path() / csv;
    LabeledDataset ds = load_csv(csv, m.num_classes);
    require(ds.feature_dim() == m.feature_dim, ErrorKind::kDimensionMismatch,
            csv.string() + " has " + std::to_string(ds.feature_dim()) + " features, manifest says " +
                std::to_string(m.feature_dim));
    return ds;
}

}  // namespace infrank
