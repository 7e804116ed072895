// infrank command-line driver: generate, train, audit, posttrain, metrics.
//
// Every subcommand writes into a run directory together with run.json, which
// records the resolved configuration and the files produced. Outputs depend
// only on the configuration and the input files; wall-clock timings are left
// out unless --timing is given.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "infrank/infrank.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace infrank;

namespace {

constexpr const char* kOutputEnv = "INFRANK_OUTPUT_DIR";

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
    std::uint64_t seed = 0;
    std::string data;  // dataset manifest
    std::string output_dir;
    std::vector<int> layers;  // empty: [d, 32, K]
    int validation_per_class = 5;
    unsigned threads = 1;
    TrainConfig train{.epochs = 200, .learning_rate = 0.01, .lr_drops = {}};

    // post-training
    int post_epochs = 10;
    int max_rounds = 3;
    double saturation_delta = 0.001;
    double refine_threshold = 0.8;
    bool refine = true;
    std::optional<int> gamma;  // default derived from the dataset's noise ratio
    std::optional<double> retrain_lr;  // defaults to train.learning_rate
    double damping = 0.01;
    std::size_t hessian_subset = 2000;
    double cg_tol = 1e-6;
    std::string osd_mode = "candidates";
    std::string selector = "influence";
    std::optional<double> small_loss_fraction;
};

json lr_drops_json(const std::vector<LrDrop>& drops) {
    json a = json::array();
    for (const auto& d : drops) a.push_back({d.epoch, d.factor});
    return a;
}

json to_json(const RunConfig& c) {
    auto opt = [](const auto& v) { return v ? json(*v) : json(nullptr); };
    return json{
        {"seed", c.seed},
        {"data", c.data},
        {"output_dir", c.output_dir},
        {"layers", c.layers},
        {"validation_per_class", c.validation_per_class},
        {"threads", c.threads},
        {"train",
         {{"epochs", c.train.epochs},
          {"learning_rate", c.train.learning_rate},
          {"momentum", c.train.momentum},
          {"batch_size", c.train.batch_size},
          {"weight_decay", c.train.weight_decay},
          {"lr_drops", lr_drops_json(c.train.lr_drops)},
          {"standardize_inputs", c.train.standardize_inputs}}},
        {"posttrain",
         {{"epochs", c.post_epochs},
          {"max_rounds", c.max_rounds},
          {"saturation_delta", c.saturation_delta},
          {"refine_threshold", c.refine_threshold},
          {"refine", c.refine},
          {"gamma", opt(c.gamma)},
          {"learning_rate", opt(c.retrain_lr)},
          {"damping", c.damping},
          {"hessian_subset", c.hessian_subset},
          {"cg_tol", c.cg_tol},
          {"osd_mode", c.osd_mode},
          {"selector", c.selector},
          {"small_loss_fraction", opt(c.small_loss_fraction)}}},
    };
}

/// Reads known keys from one JSON object and rejects anything else, so a
/// misspelled field is reported instead of silently ignored.
class FieldReader {
public:
    FieldReader(const json& obj, std::string file, std::string prefix)
        : obj_(obj), file_(std::move(file)), prefix_(std::move(prefix)) {
        if (!obj_.is_object()) fail(prefix_.empty() ? "<root>" : prefix_, "expected an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            fail(path(key), e.what());
        }
    }

    template <class T>
    void get(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end() || it->is_null()) return;
        T v{};
        try {
            v = it->template get<T>();
        } catch (const json::exception& e) {
            fail(path(key), e.what());
        }
        out = v;
    }

    void get_drops(const std::string& key, std::vector<LrDrop>& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        out.clear();
        try {
            for (const auto& d : *it) out.push_back({d.at(0).get<int>(), d.at(1).get<double>()});
        } catch (const json::exception&) {
            fail(path(key), "expected a list of [epoch, factor] pairs");
        }
    }

    FieldReader child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        auto it = obj_.find(key);
        return FieldReader(it == obj_.end() ? empty : *it, file_, path(key));
    }

    void finish() const {
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) fail(path(k), "unknown field");
    }

private:
    std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    [[noreturn]] void fail(const std::string& field, const std::string& msg) const {
        throw Error(ErrorKind::kConfig, file_ + ": field '" + field + "': " + msg);
    }

    const json& obj_;
    std::string file_;
    std::string prefix_;
    std::set<std::string> seen_;
};

void apply_config_file(RunConfig& c, const std::string& file) {
    std::ifstream is(file);
    require(static_cast<bool>(is), ErrorKind::kIo, "cannot open config " + file);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw Error(ErrorKind::kConfig, file + ": " + e.what());
    }
    FieldReader root(j, file, "");
    root.get("seed", c.seed);
    root.get("data", c.data);
    root.get("output_dir", c.output_dir);
    root.get("layers", c.layers);
    root.get("validation_per_class", c.validation_per_class);
    root.get("threads", c.threads);

    FieldReader t = root.child("train");
    t.get("epochs", c.train.epochs);
    t.get("learning_rate", c.train.learning_rate);
    t.get("momentum", c.train.momentum);
    t.get("batch_size", c.train.batch_size);
    t.get("weight_decay", c.train.weight_decay);
    t.get_drops("lr_drops", c.train.lr_drops);
    t.get("standardize_inputs", c.train.standardize_inputs);
    t.finish();

    FieldReader p = root.child("posttrain");
    p.get("epochs", c.post_epochs);
    p.get("max_rounds", c.max_rounds);
    p.get("saturation_delta", c.saturation_delta);
    p.get("refine_threshold", c.refine_threshold);
    p.get("refine", c.refine);
    p.get("gamma", c.gamma);
    p.get("learning_rate", c.retrain_lr);
    p.get("damping", c.damping);
    p.get("hessian_subset", c.hessian_subset);
    p.get("cg_tol", c.cg_tol);
    p.get("osd_mode", c.osd_mode);
    p.get("selector", c.selector);
    p.get("small_loss_fraction", c.small_loss_fraction);
    p.finish();
    root.finish();
}

// ---------------------------------------------------------------------------
// Helpers

fs::path output_dir(const RunConfig& c, const std::string& command) {
    if (!c.output_dir.empty()) return c.output_dir;
    const char* env = std::getenv(kOutputEnv);
    return fs::path(env && *env ? env : "infrank-runs") / command;
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::kIo, "cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
    os << text;
    require(static_cast<bool>(os), ErrorKind::kIo, "write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

struct LoadedData {
    LabeledDataset ds;
    DatasetManifest manifest;
};

LoadedData load_data(const RunConfig& c) {
    require(!c.data.empty(), ErrorKind::kInvalidArgument, "no dataset given (--data or \"data\" in the config)");
    require(fs::exists(c.data), ErrorKind::kIo, "dataset manifest not found: " + c.data);
    return {load_dataset(c.data), load_manifest(c.data)};
}

std::vector<int> resolve_layers(const RunConfig& c, const LabeledDataset& ds) {
    std::vector<int> dims = c.layers.empty() ? std::vector<int>{ds.feature_dim(), 32, ds.num_classes()} : c.layers;
    require(dims.size() >= 2, ErrorKind::kInvalidArgument, "layers need at least input and output widths");
    require(dims.front() == ds.feature_dim() && dims.back() == ds.num_classes(), ErrorKind::kDimensionMismatch,
            "layers [" + std::to_string(dims.front()) + ", ..., " + std::to_string(dims.back()) +
                "] do not match the dataset (d=" + std::to_string(ds.feature_dim()) +
                ", K=" + std::to_string(ds.num_classes()) + ")");
    return dims;
}

void check_model_shape(const Mlp& m, const LabeledDataset& ds) {
    require(m.input_dim() == ds.feature_dim() && m.num_classes() == ds.num_classes(), ErrorKind::kDimensionMismatch,
            "model expects d=" + std::to_string(m.input_dim()) + ", K=" + std::to_string(m.num_classes()) +
                " but the dataset has d=" + std::to_string(ds.feature_dim()) +
                ", K=" + std::to_string(ds.num_classes()));
}

std::pair<LabeledDataset, ValidationSet> split(const RunConfig& c, const LabeledDataset& ds) {
    return split_validation(ds, c.validation_per_class, derive_seed(c.seed, "split"));
}

TrainConfig pretrain_config(const RunConfig& c) {
    TrainConfig t = c.train;
    t.seed = derive_seed(c.seed, "train");
    return t;
}

Mlp pretrain(const RunConfig& c, const std::vector<int>& dims, const LabeledDataset& train_set) {
    return train(init_model(dims, derive_seed(c.seed, "init")), train_set, pretrain_config(c));
}

int resolve_gamma(const RunConfig& c, const LoadedData& d) {
    if (c.gamma) return *c.gamma;
    const double ratio = d.manifest.noise_spec ? d.manifest.noise_spec->ratio : 0.0;
    return default_gamma(ratio, d.ds.num_classes());
}

OsdNormalization osd_mode(const RunConfig& c) {
    if (c.osd_mode == "candidates") return OsdNormalization::kOverCandidates;
    if (c.osd_mode == "classes") return OsdNormalization::kOverClasses;
    throw Error(ErrorKind::kConfig, "osd_mode must be 'candidates' or 'classes', got '" + c.osd_mode + "'");
}

SelectorKind selector_kind(const RunConfig& c) {
    if (c.selector == "influence") return SelectorKind::kInfluence;
    if (c.selector == "small-loss") return SelectorKind::kSmallLoss;
    throw Error(ErrorKind::kConfig, "selector must be 'influence' or 'small-loss', got '" + c.selector + "'");
}

ScoringOptions scoring_options(const RunConfig& c) {
    ScoringOptions s;
    s.damping = c.damping;
    s.hessian_subset = c.hessian_subset;
    s.cg.tol = c.cg_tol;
    s.threads = c.threads;
    s.osd_mode = osd_mode(c);
    s.seed = derive_seed(c.seed, "scoring");
    return s;
}

json metrics_json(const DetectionMetrics& m) { return infrank::to_json(m); }

void write_run_manifest(const fs::path& dir, const std::string& command, const RunConfig& c,
                        const std::vector<std::string>& outputs, json extra = json::object()) {
    json j{{"command", command}, {"config", to_json(c)}, {"outputs", outputs}};
    for (auto& [k, v] : extra.items()) j[k] = v;
    write_json(dir / "run.json", j);
}

std::string fixed(double v) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenerateArgs {
    std::string kind;
    std::size_t n = 100;
    int k = 4;
    std::size_t per_class = 100;
    int d = 2;
    double separation = 4.0;
    double noise = 0.0;
};

int cmd_generate(const RunConfig& c, const GenerateArgs& g) {
    LabeledDataset ds;
    if (g.kind == "toy") {
        ds = generate_toy(g.n, derive_seed(c.seed, "data"));
    } else {
        ds = generate_blobs(g.per_class, g.k, g.d, g.separation, derive_seed(c.seed, "data"));
    }
    DatasetManifest man{ds.num_classes(), ds.feature_dim(), "dataset.csv", std::nullopt};
    if (g.noise > 0.0) {
        const NoiseSpec spec{g.noise, derive_seed(c.seed, "noise")};
        ds = inject_noise(ds, spec);
        man.noise_spec = spec;
    } else {
        require(g.noise == 0.0, ErrorKind::kInvalidArgument, "noise ratio must be in [0, 1]");
    }
    const fs::path dir = output_dir(c, "generate");
    make_dir(dir);
    save_csv(ds, dir / "dataset.csv");
    save_manifest(man, dir / "dataset.json");
    const std::size_t flips = detection_metrics(ds, {}).flipped_total;
    json extra{{"generator",
                {{"kind", g.kind},
                 {"n", g.n},
                 {"k", g.k},
                 {"per_class", g.per_class},
                 {"d", g.d},
                 {"separation", g.separation},
                 {"noise", g.noise}}},
               {"rows", ds.size()},
               {"flipped", flips}};
    write_run_manifest(dir, "generate", c, {"dataset.csv", "dataset.json"}, extra);
    std::cout << "wrote " << ds.size() << " rows (" << flips << " flipped) to " << (dir / "dataset.csv").string()
              << '\n';
    return 0;
}

int cmd_train(const RunConfig& c) {
    const LoadedData data = load_data(c);
    const auto dims = resolve_layers(c, data.ds);
    const auto [train_set, val] = split(c, data.ds);
    const Mlp m = pretrain(c, dims, train_set);

    const fs::path dir = output_dir(c, "train");
    make_dir(dir);
    save_model(m, dir / "model.json");
    json metrics{{"train_acc", accuracy(m, train_set)},
                 {"val_acc", accuracy(m, val.all())},
                 {"train_size", train_set.size()},
                 {"val_size", val.size()},
                 {"layers", dims}};
    if (train_set.has_true_labels()) metrics["train_acc_true_labels"] = accuracy(m, train_set, LabelSource::kTrue);
    write_json(dir / "metrics.json", metrics);
    write_run_manifest(dir, "train", c, {"model.json", "metrics.json"});
    std::cout << "train_acc " << fixed(metrics["train_acc"]) << "  val_acc " << fixed(metrics["val_acc"]) << '\n';
    return 0;
}

Mlp obtain_model(const RunConfig& c, const std::string& model_path, const LoadedData& data,
                 const LabeledDataset& train_set) {
    if (!model_path.empty()) {
        require(fs::exists(model_path), ErrorKind::kIo, "model checkpoint not found: " + model_path);
        Mlp m = load_model(model_path);
        check_model_shape(m, data.ds);
        return m;
    }
    return pretrain(c, resolve_layers(c, data.ds), train_set);
}

int cmd_audit(const RunConfig& c, const std::string& model_path, bool ground_truth) {
    const LoadedData data = load_data(c);
    const auto [train_set, val] = split(c, data.ds);
    const Mlp m = obtain_model(c, model_path, data, train_set);
    require(!ground_truth || train_set.has_true_labels(), ErrorKind::kMissingTrueLabel,
            "--ground-truth needs a true_label column on every row");

    const fs::path dir = output_dir(c, "audit");
    make_dir(dir);
    std::vector<std::string> outputs;
    std::vector<SampleId> selected;
    json summary{{"selector", c.selector}, {"train_size", train_set.size()}};

    if (selector_kind(c) == SelectorKind::kSmallLoss) {
        SmallLossOptions opts;
        opts.fraction = c.small_loss_fraction;
        selected = small_loss_select(m, train_set, opts);
        const Eigen::VectorXd losses = sample_losses(m, train_set.samples());
        const std::set<SampleId> chosen(selected.begin(), selected.end());
        std::ostringstream os;
        os << "id,loss,selected\n";
        for (std::size_t i = 0; i < train_set.size(); ++i)
            os << train_set[i].id << ',' << detail::format_double(losses[static_cast<Eigen::Index>(i)]) << ','
               << (chosen.count(train_set[i].id) ? 1 : 0) << '\n';
        write_text(dir / "selection.csv", os.str());
        outputs.push_back("selection.csv");
    } else {
        SelectionConfig scfg;
        scfg.gamma = resolve_gamma(c, data);
        scfg.validation_per_class = c.validation_per_class;
        scfg.osd_mode = osd_mode(c);
        scfg.gmm.seed = derive_seed(c.seed, "selection");
        validate(scfg, train_set.num_classes());
        const ScoringResult scored = compute_scores(m, train_set, val, scoring_options(c));
        const Selection sel = select_noisy(scored.table, scfg);
        selected = sel.selected;
        std::ostringstream scores, norms, on_data;
        write_scores_csv(scores, scored.table, sel);
        write_influence_norms_csv(norms, scored.influences);
        write_influence_on_data_csv(on_data, scored.on_data);
        write_text(dir / "scores.csv", scores.str());
        write_text(dir / "influence_norms.csv", norms.str());
        write_text(dir / "influence_on_data.csv", on_data.str());
        outputs.insert(outputs.end(), {"scores.csv", "influence_norms.csv", "influence_on_data.csv"});
        summary["gamma"] = scfg.gamma;
        summary["candidates"] = scored.table.candidates().size();
        summary["thresholds"] = sel.thresholds;
        summary["max_cg_residual"] = scored.max_cg_residual;
        summary["hessian_subset"] = scored.hessian_subset_size;
    }
    summary["selected"] = selected;
    summary["selected_size"] = selected.size();
    if (ground_truth) summary["ground_truth"] = metrics_json(detection_metrics(train_set, selected));
    write_json(dir / "audit.json", summary);
    outputs.push_back("audit.json");
    write_run_manifest(dir, "audit", c, outputs, {{"model", model_path}});

    std::cout << "selected " << selected.size() << " of " << train_set.size() << " samples\n";
    if (ground_truth) {
        const auto& g = summary["ground_truth"];
        auto show = [](const json& v) { return v.is_null() ? std::string("n/a") : fixed(v.get<double>()); };
        std::cout << "precision " << show(g["precision"]) << "  recall " << show(g["recall"]) << "  f1 "
                  << fixed(g["f1"]) << '\n';
    }
    return 0;
}

int cmd_posttrain(const RunConfig& c, const std::string& model_path, bool timing) {
    const LoadedData data = load_data(c);
    const auto [train_set, val] = split(c, data.ds);
    const Mlp start = obtain_model(c, model_path, data, train_set);

    PostTrainConfig pc;
    pc.epochs = c.post_epochs;
    pc.max_rounds = c.max_rounds;
    pc.saturation_delta = c.saturation_delta;
    pc.refine_threshold = c.refine_threshold;
    pc.selector = selector_kind(c);
    pc.selection.gamma = resolve_gamma(c, data);
    pc.selection.validation_per_class = c.validation_per_class;
    pc.selection.osd_mode = osd_mode(c);
    pc.scoring = scoring_options(c);
    pc.small_loss.fraction = c.small_loss_fraction;
    pc.retrain = c.train;
    pc.retrain.learning_rate = c.retrain_lr.value_or(c.train.learning_rate);
    pc.retrain.lr_drops = {{std::max(1, c.post_epochs / 2), 0.1}};
    pc.seed = c.seed;
    validate(pc, train_set.num_classes());

    const fs::path dir = output_dir(c, "posttrain");
    const fs::path rounds_dir = dir / "rounds";
    make_dir(rounds_dir);
    std::vector<std::string> outputs;
    save_model(start, dir / "initial_model.json");
    outputs.push_back("initial_model.json");

    auto observer = [&](int round, const ScoringResult* scored, const Selection* sel, const Mlp& current) {
        const fs::path rd = rounds_dir / ("round_" + std::to_string(round));
        make_dir(rd);
        const std::string rel = "rounds/round_" + std::to_string(round) + "/";
        save_model(current, rd / "model_in.json");
        outputs.push_back(rel + "model_in.json");
        if (scored && sel) {
            std::ostringstream os;
            write_scores_csv(os, scored->table, *sel);
            write_text(rd / "scores.csv", os.str());
            outputs.push_back(rel + "scores.csv");
        }
    };
    PostTrainResult res = post_train(start, train_set, val, pc, observer);
    AuditReport& rep = res.report;
    if (!timing)
        for (auto& r : rep.rounds) r.wall_time_s = 0.0;

    save_model(res.model, dir / "model.json");
    save_csv(res.clean, dir / "clean.csv");
    save_manifest({res.clean.num_classes(), res.clean.feature_dim(), "clean.csv", std::nullopt}, dir / "clean.json");
    outputs.insert(outputs.end(), {"model.json", "clean.csv", "clean.json"});
    rep.final_model_path = "model.json";

    json extra{{"model", model_path}};
    if (c.refine && !rep.aborted()) {
        std::vector<Sample> removed;
        for (const auto& s : train_set)
            if (!res.clean.find(s.id)) removed.push_back(s);
        const Refinement ref = refine_labels(res.model, removed, pc.refine_threshold);
        rep.refinement = refinement_stats(ref);
        const LabeledDataset refined = res.clean.with(ref.kept);
        save_csv(refined, dir / "refined.csv");
        save_manifest({refined.num_classes(), refined.feature_dim(), "refined.csv", std::nullopt},
                      dir / "refined.json");
        rep.refined_dataset_path = "refined.json";
        const Mlp final_model =
            final_retrain(derive_seed(c.seed, "final-init"), res.model.layer_dims, refined, pretrain_config(c));
        save_model(final_model, dir / "final_model.json");
        outputs.insert(outputs.end(), {"refined.csv", "refined.json", "final_model.json"});
        extra["final_model_val_acc"] = accuracy(final_model, val.all());
        rep.final_model_path = "final_model.json";
    }

    json report = infrank::to_json(rep);
    for (auto& [k, v] : extra.items()) report[k] = v;
    write_json(dir / "report.json", report);
    std::ostringstream series;
    write_round_series_csv(series, rep);
    write_text(dir / "rounds.csv", series.str());
    outputs.insert(outputs.end(), {"report.json", "rounds.csv"});
    write_run_manifest(dir, "posttrain", c, outputs, {{"model", model_path}});

    for (const auto& r : rep.rounds)
        std::cout << "round " << r.round << ": " << to_string(r.outcome) << ", selected " << r.selected.size()
                  << ", val_acc " << fixed(r.val_acc_before) << " -> " << fixed(r.val_acc_after) << '\n';
    std::cout << "clean set " << rep.initial_clean_size << " -> " << rep.final_clean_size << '\n';
    if (rep.aborted()) throw Error(ErrorKind::kEmptyCleanSet, "a round would have removed every training sample");
    return 0;
}

std::vector<SampleId> read_id_list(const std::string& path) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::kIo, "cannot open " + path);
    std::vector<SampleId> ids;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto first = detail::split_row(line).front();
        if (first.empty()) continue;
        SampleId id = 0;
        if (detail::parse_number(first, id)) {
            ids.push_back(id);
        } else if (lineno != 1) {  // a non-numeric first line is a header
            throw Error(ErrorKind::kMalformedRow, path + ":" + std::to_string(lineno) + ": not a sample id");
        }
    }
    return ids;
}

int cmd_metrics(const RunConfig& c, const std::string& removed_path, const std::string& clean_path) {
    const LoadedData data = load_data(c);
    require(removed_path.empty() != clean_path.empty(), ErrorKind::kInvalidArgument,
            "give exactly one of --removed or --clean");
    std::vector<SampleId> removed;
    if (!removed_path.empty()) {
        removed = read_id_list(removed_path);
    } else {
        const LabeledDataset clean = load_dataset(clean_path);
        for (const auto& s : data.ds)
            if (!clean.find(s.id)) removed.push_back(s.id);
    }
    const json j = metrics_json(detection_metrics(data.ds, removed));
    std::cout << j.dump(2) << '\n';
    if (!c.output_dir.empty() || std::getenv(kOutputEnv)) {
        const fs::path dir = output_dir(c, "metrics");
        make_dir(dir);
        write_json(dir / "metrics.json", j);
    }
    return 0;
}

std::vector<int> parse_layers(const std::string& text) {
    std::vector<int> out;
    for (auto f : detail::split_row(text)) {
        int v = 0;
        require(detail::parse_number(f, v) && v >= 1, ErrorKind::kInvalidArgument,
                "--layers expects comma-separated positive widths, got '" + text + "'");
        out.push_back(v);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Influence-based noisy-label ranking and post-training"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "infrank 1.0");

    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> data, out, layers, selector, osd;
    std::optional<int> epochs, batch_size, val_per_class, rounds, post_epochs, gamma;
    std::optional<double> lr, momentum, weight_decay, delta, refine_threshold, retrain_lr, damping, fraction;
    std::optional<unsigned> threads;
    std::string model_path, removed_path, clean_path;
    bool ground_truth = false, timing = false, no_refine = false;
    GenerateArgs gen;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_file, "JSON run configuration (flags override it)");
        sub->add_option("--seed", seed, "global seed");
        sub->add_option("--out", out, std::string("output directory (default $") + kOutputEnv + "/<command>)");
    };
    auto data_opts = [&](CLI::App* sub) {
        sub->add_option("--data", data, "dataset manifest (JSON)");
        sub->add_option("--val-per-class", val_per_class, "clean validation samples per class");
    };
    auto train_opts = [&](CLI::App* sub) {
        sub->add_option("--layers", layers, "layer widths, e.g. 2,50,2");
        sub->add_option("--epochs", epochs, "training epochs");
        sub->add_option("--lr", lr, "learning rate");
        sub->add_option("--batch-size", batch_size, "mini-batch size");
        sub->add_option("--momentum", momentum, "SGD momentum");
        sub->add_option("--weight-decay", weight_decay, "L2 weight decay");
    };
    auto score_opts = [&](CLI::App* sub) {
        sub->add_option("--model", model_path, "model checkpoint (trained from scratch when absent)");
        sub->add_option("--gamma", gamma, "consensus count (default from the noise ratio)");
        sub->add_option("--selector", selector, "influence or small-loss")
            ->check(CLI::IsMember({"influence", "small-loss"}));
        sub->add_option("--small-loss-fraction", fraction, "small-loss: take this top fraction instead of the GMM");
        sub->add_option("--osd-mode", osd, "candidates or classes")->check(CLI::IsMember({"candidates", "classes"}));
        sub->add_option("--damping", damping, "Hessian damping");
        sub->add_option("--threads", threads, "worker threads for scoring")->check(CLI::PositiveNumber);
    };

    auto* gen_cmd = app.add_subcommand("generate", "write a synthetic dataset and its manifest");
    gen_cmd->add_option("kind", gen.kind, "toy or blobs")->required()->check(CLI::IsMember({"toy", "blobs"}));
    gen_cmd->add_option("--n", gen.n, "toy: number of points");
    gen_cmd->add_option("--k", gen.k, "blobs: number of classes");
    gen_cmd->add_option("--per-class", gen.per_class, "blobs: points per class");
    gen_cmd->add_option("--d", gen.d, "blobs: feature dimension");
    gen_cmd->add_option("--separation", gen.separation, "blobs: centre distance from the origin");
    gen_cmd->add_option("--noise", gen.noise, "symmetric label-noise ratio");
    common(gen_cmd);

    auto* train_cmd = app.add_subcommand("train", "train a classifier and write a checkpoint");
    common(train_cmd);
    data_opts(train_cmd);
    train_opts(train_cmd);

    auto* audit_cmd = app.add_subcommand("audit", "score every training sample and select noisy-probable ones");
    common(audit_cmd);
    data_opts(audit_cmd);
    train_opts(audit_cmd);
    score_opts(audit_cmd);
    audit_cmd->add_flag("--ground-truth", ground_truth, "report precision and recall against true labels");

    auto* post_cmd = app.add_subcommand("posttrain", "iterative removal and retraining with rollback");
    common(post_cmd);
    data_opts(post_cmd);
    train_opts(post_cmd);
    score_opts(post_cmd);
    post_cmd->add_option("--rounds", rounds, "maximum number of rounds");
    post_cmd->add_option("--post-epochs", post_epochs, "retraining epochs per round");
    post_cmd->add_option("--retrain-lr", retrain_lr, "initial learning rate of each retraining round");
    post_cmd->add_option("--delta", delta, "validation-accuracy gain needed to keep a round");
    post_cmd->add_option("--refine-threshold", refine_threshold, "softmax confidence needed to keep a relabel");
    post_cmd->add_flag("--no-refine", no_refine, "skip relabeling and the final retrain");
    post_cmd->add_flag("--timing", timing, "record wall-clock time per round in the report");

    auto* metrics_cmd = app.add_subcommand("metrics", "detection precision and remaining noise of a removal");
    common(metrics_cmd);
    metrics_cmd->add_option("--data", data, "original dataset manifest with true labels");
    metrics_cmd->add_option("--removed", removed_path, "file with one removed sample id per line");
    metrics_cmd->add_option("--clean", clean_path, "manifest of the surviving dataset");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return static_cast<int>(ErrorKind::kInvalidArgument);
    }

    try {
        RunConfig c;
        if (!config_file.empty()) apply_config_file(c, config_file);
        if (seed) c.seed = *seed;
        if (data) c.data = *data;
        if (out) c.output_dir = *out;
        if (layers) c.layers = parse_layers(*layers);
        if (val_per_class) c.validation_per_class = *val_per_class;
        if (threads) c.threads = *threads;
        if (epochs) c.train.epochs = *epochs;
        if (lr) c.train.learning_rate = *lr;
        if (batch_size) c.train.batch_size = *batch_size;
        if (momentum) c.train.momentum = *momentum;
        if (weight_decay) c.train.weight_decay = *weight_decay;
        if (rounds) c.max_rounds = *rounds;
        if (post_epochs) c.post_epochs = *post_epochs;
        if (retrain_lr) c.retrain_lr = *retrain_lr;
        if (delta) c.saturation_delta = *delta;
        if (refine_threshold) c.refine_threshold = *refine_threshold;
        if (no_refine) c.refine = false;
        if (gamma) c.gamma = *gamma;
        if (selector) c.selector = *selector;
        if (osd) c.osd_mode = *osd;
        if (damping) c.damping = *damping;
        if (fraction) c.small_loss_fraction = *fraction;
        validate(c.train);
        require(c.threads >= 1, ErrorKind::kInvalidArgument, "threads must be >= 1");

        if (*gen_cmd) return cmd_generate(c, gen);
        if (*train_cmd) return cmd_train(c);
        if (*audit_cmd) return cmd_audit(c, model_path, ground_truth);
        if (*post_cmd) return cmd_posttrain(c, model_path, timing);
        if (*metrics_cmd) return cmd_metrics(c, removed_path, clean_path);
    } catch (const Error& e) {
        std::cerr << "infrank: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "infrank: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
