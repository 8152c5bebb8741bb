#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "slidesurv/data_io.hpp"
#include "slidesurv/metrics.hpp"
#include "slidesurv/model.hpp"
#include "slidesurv/sha1.hpp"
#include "slidesurv/trainer.hpp"
#include "slidesurv/types.hpp"

// End-to-end runs behind the CLI subcommands: train, eval, predict,
// export-curves. Every artifact embeds the parsed config, the seed, and a
// git-style content hash of the inputs; no timestamps, so identical runs
// produce byte-identical outputs.

namespace slidesurv {

struct RunConfig {
    double quantile = 0.25;
    int knn = 10;
    int cluster_size = 64;
    int clusters = 0;  // 0: derive from cluster_size
    int heads = 8;
    int experts = 2;
    int gmm_components = 100;
    double learning_rate = 2e-4;
    double weight_decay = 1e-3;
    double dropout = 0.1;
    double lambda_div = 0.01;
    double lambda_ent = 0.01;
    int epochs = 20;
    int folds = 5;
    std::uint64_t seed = 1;
    bool dynamic_filtering = true;
    bool cluster_attention = true;
    std::string time_unit = "days";
    int grid_points = 100;
    double tau = 0.0;  // 0: max observed time of the evaluated cohort
    int selector_hidden = 256;
    int pool_hidden = 128;
    int encoder_hidden = 128;
    int encoder_out = 128;

    double time_scale() const {
        if (time_unit == "days") return 365.0;
        if (time_unit == "months") return 12.0;
        if (time_unit == "years") return 1.0;
        throw std::invalid_argument("time_unit must be days, months or years");
    }

    ModelConfig model_config(int feature_dim) const {
        ModelConfig m;
        m.feature_dim = feature_dim;
        m.selector_hidden = selector_hidden;
        m.heads = heads;
        m.knn = knn;
        m.cluster_size = cluster_size;
        m.clusters = clusters;
        m.gmm_components = gmm_components;
        m.experts = experts;
        m.pool_hidden = pool_hidden;
        m.encoder_hidden = encoder_hidden;
        m.encoder_out = encoder_out;
        m.quantile = quantile;
        m.dropout = dropout;
        m.lambda_div = lambda_div;
        m.lambda_ent = lambda_ent;
        m.time_scale = time_scale();
        m.dynamic_filtering = dynamic_filtering;
        m.cluster_attention = cluster_attention;
        return m;
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = nlohmann::json{{"quantile", c.quantile},
                       {"knn", c.knn},
                       {"cluster_size", c.cluster_size},
                       {"clusters", c.clusters},
                       {"heads", c.heads},
                       {"experts", c.experts},
                       {"gmm_components", c.gmm_components},
                       {"learning_rate", c.learning_rate},
                       {"weight_decay", c.weight_decay},
                       {"dropout", c.dropout},
                       {"lambda_div", c.lambda_div},
                       {"lambda_ent", c.lambda_ent},
                       {"epochs", c.epochs},
                       {"folds", c.folds},
                       {"seed", c.seed},
                       {"dynamic_filtering", c.dynamic_filtering},
                       {"cluster_attention", c.cluster_attention},
                       {"time_unit", c.time_unit},
                       {"grid_points", c.grid_points},
                       {"tau", c.tau},
                       {"selector_hidden", c.selector_hidden},
                       {"pool_hidden", c.pool_hidden},
                       {"encoder_hidden", c.encoder_hidden},
                       {"encoder_out", c.encoder_out}};
}

template <class Scalar>
struct Cohort {
    std::vector<SlideBag<Scalar>> bags;     // aligned with labels
    std::vector<SurvivalLabel> labels;
    std::string input_hash;
};

// Loads every labeled bag from data_dir/<slide_id>/ and computes the
// combined content hash of the label table and all bag files.
template <class Scalar>
Cohort<Scalar> load_cohort(const std::filesystem::path& data_dir,
                           const std::filesystem::path& labels_path) {
    Cohort<Scalar> cohort;
    cohort.labels = load_labels(labels_path);
    std::ostringstream manifest;
    {
        std::ifstream in(labels_path, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        manifest << "labels:" << git_blob_hash(ss.str()) << "\n";
    }
    for (const auto& lbl : cohort.labels) {
        const auto dir = data_dir / lbl.slide_id;
        cohort.bags.push_back(load_slide<Scalar>(dir));
        if (cohort.bags.back().slide_id != lbl.slide_id)
            throw DataError(DataErrorKind::BadFormat,
                            "slide_id mismatch between labels and " + dir.string());
        for (const char* fname : {"meta.json", "features.bin", "coords.bin"}) {
            std::ifstream in(dir / fname, std::ios::binary);
            std::ostringstream ss;
            ss << in.rdbuf();
            manifest << lbl.slide_id << "/" << fname << ":" << git_blob_hash(ss.str()) << "\n";
        }
    }
    cohort.input_hash = Sha1::hash(manifest.str());
    return cohort;
}

template <class Scalar>
std::vector<Scalar> make_time_grid(double t_max, int points) {
    if (points < 2 || !(t_max > 0.0)) throw std::invalid_argument("make_time_grid: bad inputs");
    std::vector<Scalar> grid(static_cast<std::size_t>(points));
    for (int j = 1; j <= points; ++j)
        grid[static_cast<std::size_t>(j - 1)] =
            static_cast<Scalar>(t_max * static_cast<double>(j) / points);
    return grid;
}

// Evaluates SPF curves for every bag on a shared grid.
template <class Scalar>
CohortPredictions<Scalar> predict_cohort(const SurvivalModel<Scalar>& model,
                                         const std::vector<SlideBag<Scalar>>& bags,
                                         const std::vector<SurvivalLabel>& labels,
                                         const std::vector<Scalar>& grid) {
    CohortPredictions<Scalar> preds;
    preds.grid = grid;
    preds.spf.resize(static_cast<Eigen::Index>(bags.size()),
                     static_cast<Eigen::Index>(grid.size()));
    for (std::size_t i = 0; i < bags.size(); ++i) {
        const MixtureDensity<Scalar> d = model.predict_density(bags[i].features, bags[i].coords);
        for (std::size_t j = 0; j < grid.size(); ++j)
            preds.spf(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                model.spf_at(d, static_cast<double>(grid[j]));
    }
    preds.times.reserve(labels.size());
    preds.events.reserve(labels.size());
    for (const auto& l : labels) {
        preds.times.push_back(static_cast<Scalar>(l.time));
        preds.events.push_back(l.event);
    }
    return preds;
}

struct EvalSummary {
    double tdc = 0.0;
    double ibs = 0.0;
    double cindex = 0.0;
    double tau = 0.0;
};

template <class Scalar>
EvalSummary evaluate_cohort(const CohortPredictions<Scalar>& preds, double tau_req = 0.0) {
    EvalSummary s;
    const Scalar tau = tau_req > 0.0 ? static_cast<Scalar>(tau_req)
                                     : *std::max_element(preds.times.begin(), preds.times.end());
    s.tau = static_cast<double>(tau);
    s.tdc = static_cast<double>(time_dependent_concordance(preds, tau));
    s.ibs = static_cast<double>(integrated_brier_score(preds, tau));
    const RiskStratification<Scalar> strat = stratify_by_median_risk(preds);
    std::vector<Scalar> risks = strat.risks;
    s.cindex = static_cast<double>(concordance_index(risks, preds.times, preds.events));
    return s;
}

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean_of(v);
    double acc = 0.0;
    for (double x : v) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

template <class Scalar>
void write_curves_csv(const std::filesystem::path& path,
                      const std::vector<std::string>& slide_ids,
                      const CohortPredictions<Scalar>& preds) {
    std::ofstream out(path);
    out.precision(17);
    out << "slide_id,time,spf\n";
    for (std::size_t i = 0; i < slide_ids.size(); ++i)
        for (std::size_t j = 0; j < preds.grid.size(); ++j)
            out << slide_ids[i] << "," << static_cast<double>(preds.grid[j]) << ","
                << static_cast<double>(preds.spf(static_cast<Eigen::Index>(i),
                                                 static_cast<Eigen::Index>(j)))
                << "\n";
}

}  // namespace detail

struct FoldOutcome {
    int fold = 0;
    std::vector<std::string> val_ids;
    EvalSummary metrics;
    double final_train_loss = 0.0;
};

struct TrainOutcome {
    std::vector<FoldOutcome> folds;
    double mean_tdc = 0.0, std_tdc = 0.0;
    double mean_ibs = 0.0, std_ibs = 0.0;
    std::string metrics_json;  // exact bytes written to metrics.json
};

// Cross-validated training. One checkpoint, train log and validation id list
// per fold; metrics.json aggregates fold metrics as mean +/- std.
template <class Scalar>
TrainOutcome run_train(const std::filesystem::path& data_dir,
                       const std::filesystem::path& labels_path,
                       const std::filesystem::path& out_dir, const RunConfig& cfg,
                       bool parallel_folds = false) {
    if (cfg.folds < 1) throw std::invalid_argument("run_train: folds must be >= 1");
    if (cfg.epochs < 1) throw std::invalid_argument("run_train: epochs must be >= 1");
    Cohort<Scalar> cohort = load_cohort<Scalar>(data_dir, labels_path);
    std::filesystem::create_directories(out_dir);

    std::map<std::string, std::size_t> index_of;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cohort.labels.size(); ++i) {
        index_of[cohort.labels[i].slide_id] = i;
        ids.push_back(cohort.labels[i].slide_id);
    }
    const int n_folds = std::min<int>(cfg.folds, static_cast<int>(ids.size()));
    std::vector<FoldSplit> splits =
        n_folds > 1 ? kfold_splits(ids, n_folds, cfg.seed)
                    : std::vector<FoldSplit>{FoldSplit{ids, ids}};

    TrainOutcome outcome;
    outcome.folds.resize(splits.size());

    auto run_fold = [&](int f) {
        const FoldSplit& split = splits[static_cast<std::size_t>(f)];
        std::vector<SlideBag<Scalar>> train_bags, val_bags;
        std::vector<SurvivalLabel> train_labels, val_labels;
        for (const auto& id : split.train_ids) {
            train_bags.push_back(cohort.bags[index_of.at(id)]);
            train_labels.push_back(cohort.labels[index_of.at(id)]);
        }
        for (const auto& id : split.val_ids) {
            val_bags.push_back(cohort.bags[index_of.at(id)]);
            val_labels.push_back(cohort.labels[index_of.at(id)]);
        }
        double t_min = train_labels[0].time, t_max = train_labels[0].time;
        for (const auto& l : train_labels) {
            t_min = std::min(t_min, l.time);
            t_max = std::max(t_max, l.time);
        }
        const int d = static_cast<int>(train_bags[0].features.cols());
        SurvivalModel<Scalar> model(cfg.model_config(d),
                                    cfg.seed + static_cast<std::uint64_t>(f) * 7919, t_min,
                                    t_max);
        TrainOptions opts;
        opts.epochs = cfg.epochs;
        opts.learning_rate = cfg.learning_rate;
        opts.weight_decay = cfg.weight_decay;
        opts.seed = cfg.seed + static_cast<std::uint64_t>(f) * 104729;
        const std::vector<EpochStats> log = train_model(model, train_bags, train_labels, opts);

        const auto fold_dir = out_dir / ("fold_" + std::to_string(f));
        std::filesystem::create_directories(fold_dir);
        model.save(fold_dir / "checkpoint.json");
        {
            std::ofstream tl(fold_dir / "train_log.csv");
            tl.precision(17);
            tl << "epoch,mean_loss,mean_nll,floored,selection_fallbacks\n";
            for (std::size_t e = 0; e < log.size(); ++e)
                tl << e << "," << log[e].mean_loss << "," << log[e].mean_nll << ","
                   << log[e].floored << "," << log[e].fallbacks << "\n";
        }
        {
            std::ofstream vi(fold_dir / "val_ids.txt");
            for (const auto& id : split.val_ids) vi << id << "\n";
        }

        double val_t_max = 0.0;
        for (const auto& l : val_labels) val_t_max = std::max(val_t_max, l.time);
        const auto grid = make_time_grid<Scalar>(val_t_max, cfg.grid_points);
        const CohortPredictions<Scalar> preds = predict_cohort(model, val_bags, val_labels, grid);

        FoldOutcome& fo = outcome.folds[static_cast<std::size_t>(f)];
        fo.fold = f;
        fo.val_ids = split.val_ids;
        fo.metrics = evaluate_cohort(preds, cfg.tau);
        fo.final_train_loss = log.empty() ? 0.0 : log.back().mean_loss;
    };

    if (parallel_folds && splits.size() > 1) {
        std::vector<std::thread> workers;
        for (int f = 0; f < static_cast<int>(splits.size()); ++f)
            workers.emplace_back(run_fold, f);
        for (auto& w : workers) w.join();
    } else {
        for (int f = 0; f < static_cast<int>(splits.size()); ++f) run_fold(f);
    }

    std::vector<double> tdcs, ibss;
    for (const auto& fo : outcome.folds) {
        tdcs.push_back(fo.metrics.tdc);
        ibss.push_back(fo.metrics.ibs);
    }
    outcome.mean_tdc = detail::mean_of(tdcs);
    outcome.std_tdc = detail::sample_std(tdcs);
    outcome.mean_ibs = detail::mean_of(ibss);
    outcome.std_ibs = detail::sample_std(ibss);

    nlohmann::json j;
    j["config"] = cfg;
    j["seed"] = cfg.seed;
    j["input_hash"] = cohort.input_hash;
    j["folds"] = nlohmann::json::array();
    for (const auto& fo : outcome.folds) {
        nlohmann::json fj;
        fj["fold"] = fo.fold;
        fj["val_ids"] = fo.val_ids;
        fj["tdc"] = fo.metrics.tdc;
        fj["ibs"] = fo.metrics.ibs;
        fj["cindex"] = fo.metrics.cindex;
        fj["tau"] = fo.metrics.tau;
        fj["final_train_loss"] = fo.final_train_loss;
        j["folds"].push_back(std::move(fj));
    }
    j["mean"] = {{"tdc", outcome.mean_tdc}, {"ibs", outcome.mean_ibs}};
    j["std"] = {{"tdc", outcome.std_tdc}, {"ibs", outcome.std_ibs}};
    outcome.metrics_json = j.dump(1) + "\n";
    std::ofstream mj(out_dir / "metrics.json");
    mj << outcome.metrics_json;
    return outcome;
}

struct EvalOutcome {
    EvalSummary metrics;
    double logrank_statistic = 0.0;
    double logrank_p = 1.0;
    std::size_t high_risk = 0, low_risk = 0;
};

// Evaluation of a saved checkpoint: metrics + per-patient curves + KM
// stratification with the log-rank test.
template <class Scalar>
EvalOutcome run_eval(const std::filesystem::path& checkpoint,
                     const std::filesystem::path& data_dir,
                     const std::filesystem::path& labels_path,
                     const std::filesystem::path& out_dir,
                     const std::vector<std::string>& only_ids = {}, double tau = 0.0,
                     int grid_points = 100) {
    SurvivalModel<Scalar> model = SurvivalModel<Scalar>::load(checkpoint);
    Cohort<Scalar> cohort = load_cohort<Scalar>(data_dir, labels_path);
    std::filesystem::create_directories(out_dir);

    std::vector<SlideBag<Scalar>> bags;
    std::vector<SurvivalLabel> labels;
    if (only_ids.empty()) {
        bags = std::move(cohort.bags);
        labels = std::move(cohort.labels);
    } else {
        std::set<std::string> keep(only_ids.begin(), only_ids.end());
        for (std::size_t i = 0; i < cohort.labels.size(); ++i) {
            if (!keep.count(cohort.labels[i].slide_id)) continue;
            bags.push_back(std::move(cohort.bags[i]));
            labels.push_back(cohort.labels[i]);
        }
        if (bags.empty())
            throw DataError(DataErrorKind::BadFormat, "no requested slide ids in cohort");
    }
    if (static_cast<int>(bags[0].features.cols()) != model.config().feature_dim)
        throw DataError(DataErrorKind::SizeMismatch,
                        "feature dim mismatch between checkpoint and bags");

    double t_max = 0.0;
    for (const auto& l : labels) t_max = std::max(t_max, l.time);
    const auto grid = make_time_grid<Scalar>(t_max, grid_points);
    const CohortPredictions<Scalar> preds = predict_cohort(model, bags, labels, grid);

    std::vector<std::string> ids;
    for (const auto& b : bags) ids.push_back(b.slide_id);
    detail::write_curves_csv(out_dir / "curves.csv", ids, preds);

    EvalOutcome out;
    out.metrics = evaluate_cohort(preds, tau);

    const RiskStratification<Scalar> strat = stratify_by_median_risk(preds);
    out.high_risk = strat.high.size();
    out.low_risk = strat.low.size();
    auto group_data = [&](const std::vector<std::size_t>& idx) {
        std::pair<std::vector<Scalar>, std::vector<int>> g;
        for (std::size_t i : idx) {
            g.first.push_back(preds.times[i]);
            g.second.push_back(preds.events[i]);
        }
        return g;
    };
    const auto [ta, ea] = group_data(strat.high);
    const auto [tb, eb] = group_data(strat.low);
    if (!ta.empty() && !tb.empty()) {
        const LogRankResult<Scalar> lr = log_rank(ta, ea, tb, eb);
        out.logrank_statistic = static_cast<double>(lr.statistic);
        out.logrank_p = static_cast<double>(lr.p_value);
    }
    {
        std::ofstream km(out_dir / "km.csv");
        km.precision(17);
        km << "group,time,survival\n";
        auto write_group = [&](const char* name, const std::vector<Scalar>& ts,
                               const std::vector<int>& es) {
            if (ts.empty()) return;
            const KmCurve<Scalar> curve = kaplan_meier(ts, es);
            km << name << ",0,1\n";
            for (std::size_t i = 0; i < curve.times.size(); ++i)
                km << name << "," << static_cast<double>(curve.times[i]) << ","
                   << static_cast<double>(curve.surv[i]) << "\n";
        };
        write_group("high", ta, ea);
        write_group("low", tb, eb);
    }

    nlohmann::json j;
    j["checkpoint"] = checkpoint.string();
    j["input_hash"] = cohort.input_hash;
    j["config"] = model.config();
    j["n_slides"] = ids.size();
    j["tdc"] = out.metrics.tdc;
    j["ibs"] = out.metrics.ibs;
    j["cindex"] = out.metrics.cindex;
    j["tau"] = out.metrics.tau;
    j["logrank"] = {{"statistic", out.logrank_statistic},
                    {"p", out.logrank_p},
                    {"high_risk", out.high_risk},
                    {"low_risk", out.low_risk}};
    std::ofstream mj(out_dir / "metrics.json");
    mj << j.dump(1) << "\n";
    return out;
}

// Risk scores and median survival time per slide; labels not required.
template <class Scalar>
void run_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                 const std::filesystem::path& out_path,
                 const std::vector<std::string>& only_ids = {}, int grid_points = 100) {
    SurvivalModel<Scalar> model = SurvivalModel<Scalar>::load(checkpoint);
    std::vector<std::filesystem::path> dirs;
    for (const auto& entry : std::filesystem::directory_iterator(data_dir))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    const auto grid = make_time_grid<Scalar>(model.t_max(), grid_points);
    const Scalar t_med = grid[(grid.size() - 1) / 2];

    std::ofstream out(out_path);
    out.precision(17);
    out << "slide_id,risk,median_survival_time\n";
    std::set<std::string> keep(only_ids.begin(), only_ids.end());
    bool any = false;
    for (const auto& dir : dirs) {
        if (!std::filesystem::exists(dir / "meta.json")) continue;
        SlideBag<Scalar> bag = load_slide<Scalar>(dir);
        if (!keep.empty() && !keep.count(bag.slide_id)) continue;
        if (static_cast<int>(bag.features.cols()) != model.config().feature_dim)
            throw DataError(DataErrorKind::SizeMismatch,
                            "feature dim mismatch between checkpoint and " + dir.string());
        any = true;
        const MixtureDensity<Scalar> d = model.predict_density(bag.features, bag.coords);
        const double risk = 1.0 - static_cast<double>(model.spf_at(d, t_med));
        // first grid time where SPF crosses 0.5, linearly interpolated
        double median_t = std::numeric_limits<double>::quiet_NaN();
        double prev_s = 1.0, prev_t = 0.0;
        for (Scalar t : grid) {
            const double s = static_cast<double>(model.spf_at(d, t));
            if (s <= 0.5) {
                median_t = prev_s == s ? static_cast<double>(t)
                                       : prev_t + (prev_s - 0.5) / (prev_s - s) *
                                                      (static_cast<double>(t) - prev_t);
                break;
            }
            prev_s = s;
            prev_t = static_cast<double>(t);
        }
        out << bag.slide_id << "," << risk << ",";
        if (std::isnan(median_t))
            out << "\n";
        else
            out << median_t << "\n";
    }
    if (!any) throw DataError(DataErrorKind::BadFormat, "no bags found in " + data_dir.string());
}

// SPF curves on the checkpoint's time grid; labels not required.
template <class Scalar>
void run_export_curves(const std::filesystem::path& checkpoint,
                       const std::filesystem::path& data_dir,
                       const std::filesystem::path& out_path,
                       const std::vector<std::string>& only_ids = {}, int grid_points = 100) {
    SurvivalModel<Scalar> model = SurvivalModel<Scalar>::load(checkpoint);
    std::vector<std::filesystem::path> dirs;
    for (const auto& entry : std::filesystem::directory_iterator(data_dir))
        if (entry.is_directory()) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    const auto grid = make_time_grid<Scalar>(model.t_max(), grid_points);

    std::ofstream out(out_path);
    out.precision(17);
    out << "slide_id,time,spf\n";
    std::set<std::string> keep(only_ids.begin(), only_ids.end());
    bool any = false;
    for (const auto& dir : dirs) {
        if (!std::filesystem::exists(dir / "meta.json")) continue;
        SlideBag<Scalar> bag = load_slide<Scalar>(dir);
        if (!keep.empty() && !keep.count(bag.slide_id)) continue;
        any = true;
        const MixtureDensity<Scalar> d = model.predict_density(bag.features, bag.coords);
        for (Scalar t : grid)
            out << bag.slide_id << "," << static_cast<double>(t) << ","
                << static_cast<double>(model.spf_at(d, t)) << "\n";
    }
    if (!any) throw DataError(DataErrorKind::BadFormat, "no bags found in " + data_dir.string());
}

// Writes a synthetic cohort to disk: one bag directory per slide, a label
// table, and the generator's true risks for oracle evaluation.
template <class Scalar>
void run_synth(const SynthConfig& cfg, const std::filesystem::path& out_dir,
               const std::string& time_unit = "days") {
    SyntheticCohort<Scalar> cohort = generate_synthetic_cohort<Scalar>(cfg);
    std::filesystem::create_directories(out_dir);
    for (const auto& bag : cohort.bags) write_slide_bag(out_dir / bag.slide_id, bag);
    write_labels(out_dir / "labels.csv", cohort.labels, time_unit);
    std::ofstream risks(out_dir / "true_risks.csv");
    risks.precision(17);
    risks << "slide_id,true_risk,event_rate,weibull_shape\n";
    for (std::size_t i = 0; i < cohort.bags.size(); ++i)
        risks << cohort.bags[i].slide_id << "," << cohort.true_risks[i] << ","
              << cohort.true_event_rates[i] << "," << cohort.weibull_shape << "\n";
}

}  // namespace slidesurv
