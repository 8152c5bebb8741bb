// slidesurv: whole-slide survival pipeline on precomputed patch features.
//
// Subcommands: synth, train, eval, predict, export-curves.
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "slidesurv/data_io.hpp"
#include "slidesurv/run.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

using Real = double;

void add_model_flags(CLI::App* cmd, slidesurv::RunConfig& cfg) {
    cmd->add_option("--quantile", cfg.quantile, "Patch-selection quantile q")
        ->capture_default_str();
    cmd->add_option("--knn", cfg.knn, "Neighbors per patch in the k-NN graph")
        ->capture_default_str();
    cmd->add_option("--cluster-size", cfg.cluster_size,
                    "Target patches per cluster (C = ceil(m / cluster_size))")
        ->capture_default_str();
    cmd->add_option("--clusters", cfg.clusters, "Fixed cluster count (overrides --cluster-size)")
        ->capture_default_str();
    cmd->add_option("--heads", cfg.heads, "Attention heads")->capture_default_str();
    cmd->add_option("--experts", cfg.experts, "Mixture-density experts (1 or 2)")
        ->capture_default_str();
    cmd->add_option("--gmm-components", cfg.gmm_components, "GMM components per expert")
        ->capture_default_str();
    cmd->add_option("--dropout", cfg.dropout, "Dropout rate")->capture_default_str();
    cmd->add_option("--lambda-div", cfg.lambda_div, "Expert diversity loss weight")
        ->capture_default_str();
    cmd->add_option("--lambda-ent", cfg.lambda_ent, "Gate entropy loss weight")
        ->capture_default_str();
    cmd->add_flag_callback(
        "--no-dynamic-filtering", [&cfg] { cfg.dynamic_filtering = false; },
        "Bypass patch selection; all patches flow to clustering");
    cmd->add_flag_callback(
        "--no-cluster-attention", [&cfg] { cfg.cluster_attention = false; },
        "Bypass cluster attention; pooled features are the selected patches");
    cmd->add_option("--time-unit", cfg.time_unit, "Label time unit: days, months or years")
        ->capture_default_str();
    cmd->add_option("--grid-points", cfg.grid_points, "Survival curve grid size")
        ->capture_default_str();
    cmd->add_option("--tau", cfg.tau, "Metrics horizon (default: max observed time)")
        ->capture_default_str();
    cmd->add_option("--selector-hidden", cfg.selector_hidden, "Selector MLP hidden size")
        ->capture_default_str();
    cmd->add_option("--pool-hidden", cfg.pool_hidden, "Pooling hidden size")
        ->capture_default_str();
    cmd->add_option("--encoder-hidden", cfg.encoder_hidden, "Survival encoder hidden size")
        ->capture_default_str();
    cmd->add_option("--encoder-out", cfg.encoder_out, "Survival encoder output size")
        ->capture_default_str();
}

std::vector<std::string> read_ids_file(const std::string& path) {
    std::vector<std::string> ids;
    if (path.empty()) return ids;
    std::ifstream in(path);
    if (!in) throw slidesurv::DataError(slidesurv::DataErrorKind::MissingFile,
                                        "missing ids file: " + path);
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ids.push_back(line);
    return ids;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Whole-slide survival modeling on precomputed patch features"};
    app.require_subcommand(1);

    // ---- synth ----
    slidesurv::SynthConfig synth_cfg;
    std::string synth_out;
    std::string synth_time_unit = "days";
    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
    synth->add_option("--out", synth_out, "Output cohort directory")->required();
    synth->add_option("--slides", synth_cfg.n_slides, "Number of slides")->capture_default_str();
    synth->add_option("--min-patches", synth_cfg.min_patches, "Min patches per slide")
        ->capture_default_str();
    synth->add_option("--max-patches", synth_cfg.max_patches, "Max patches per slide")
        ->capture_default_str();
    synth->add_option("--dim", synth_cfg.feature_dim, "Feature dimension")
        ->capture_default_str();
    synth->add_option("--phenotypes", synth_cfg.phenotypes, "Informative phenotype count")
        ->capture_default_str();
    synth->add_option("--beta", synth_cfg.effect_size, "Prognostic effect size")
        ->capture_default_str();
    synth->add_option("--censoring", synth_cfg.censoring_fraction, "Censoring fraction")
        ->capture_default_str();
    synth->add_option("--mean-time", synth_cfg.mean_event_time, "Target mean event time")
        ->capture_default_str();
    synth->add_option("--feature-noise", synth_cfg.feature_noise, "Per-patch feature noise")
        ->capture_default_str();
    synth->add_option("--seed", synth_cfg.seed, "Generator seed")->capture_default_str();
    synth->add_option("--time-unit", synth_time_unit, "Label time unit")->capture_default_str();

    // ---- train ----
    slidesurv::RunConfig train_cfg;
    std::string train_data, train_labels, train_out;
    bool parallel_folds = false;
    auto* train = app.add_subcommand("train", "Cross-validated training");
    train->add_option("--data", train_data, "Cohort directory")->required();
    train->add_option("--labels", train_labels, "Label CSV (slide_id,time,event)")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--epochs", train_cfg.epochs, "Training epochs")->capture_default_str();
    train->add_option("--lr", train_cfg.learning_rate, "Adam learning rate")
        ->capture_default_str();
    train->add_option("--weight-decay", train_cfg.weight_decay, "Decoupled weight decay")
        ->capture_default_str();
    train->add_option("--folds", train_cfg.folds, "Cross-validation folds")
        ->capture_default_str();
    train->add_option("--seed", train_cfg.seed, "Run seed")->capture_default_str();
    train->add_flag("--parallel-folds", parallel_folds, "Train folds on separate threads");
    add_model_flags(train, train_cfg);

    // ---- eval ----
    std::string eval_ckpt, eval_data, eval_labels, eval_out, eval_ids;
    double eval_tau = 0.0;
    int eval_grid = 100;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint against labels");
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint JSON")->required();
    eval->add_option("--data", eval_data, "Cohort directory")->required();
    eval->add_option("--labels", eval_labels, "Label CSV")->required();
    eval->add_option("--out", eval_out, "Output directory")->required();
    eval->add_option("--ids-file", eval_ids, "Restrict to slide ids listed in a file");
    eval->add_option("--tau", eval_tau, "Metrics horizon")->capture_default_str();
    eval->add_option("--grid-points", eval_grid, "Curve grid size")->capture_default_str();

    // ---- predict ----
    std::string pred_ckpt, pred_data, pred_out, pred_ids;
    int pred_grid = 100;
    auto* predict = app.add_subcommand("predict", "Risk scores for unlabeled bags");
    predict->add_option("--checkpoint", pred_ckpt, "Checkpoint JSON")->required();
    predict->add_option("--data", pred_data, "Cohort directory")->required();
    predict->add_option("--out", pred_out, "Output CSV path")->required();
    predict->add_option("--ids-file", pred_ids, "Restrict to slide ids listed in a file");
    predict->add_option("--grid-points", pred_grid, "Curve grid size")->capture_default_str();

    // ---- export-curves ----
    std::string exp_ckpt, exp_data, exp_out, exp_ids;
    int exp_grid = 100;
    auto* exportc = app.add_subcommand("export-curves", "Write SPF curves for bags");
    exportc->add_option("--checkpoint", exp_ckpt, "Checkpoint JSON")->required();
    exportc->add_option("--data", exp_data, "Cohort directory")->required();
    exportc->add_option("--out", exp_out, "Output CSV path")->required();
    exportc->add_option("--ids-file", exp_ids, "Restrict to slide ids listed in a file");
    exportc->add_option("--grid-points", exp_grid, "Curve grid size")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (synth->parsed()) {
            slidesurv::run_synth<Real>(synth_cfg, synth_out, synth_time_unit);
            std::cout << "wrote cohort to " << synth_out << "\n";
        } else if (train->parsed()) {
            const auto outcome = slidesurv::run_train<Real>(train_data, train_labels, train_out,
                                                            train_cfg, parallel_folds);
            for (const auto& fo : outcome.folds)
                std::cout << "fold " << fo.fold << ": tdc=" << fo.metrics.tdc
                          << " ibs=" << fo.metrics.ibs << "\n";
            std::cout << "mean tdc=" << outcome.mean_tdc << " +/- " << outcome.std_tdc
                      << ", mean ibs=" << outcome.mean_ibs << " +/- " << outcome.std_ibs << "\n";
        } else if (eval->parsed()) {
            const auto outcome = slidesurv::run_eval<Real>(
                eval_ckpt, eval_data, eval_labels, eval_out, read_ids_file(eval_ids), eval_tau,
                eval_grid);
            std::cout << "tdc=" << outcome.metrics.tdc << " ibs=" << outcome.metrics.ibs
                      << " cindex=" << outcome.metrics.cindex
                      << " logrank_p=" << outcome.logrank_p << "\n";
        } else if (predict->parsed()) {
            slidesurv::run_predict<Real>(pred_ckpt, pred_data, pred_out,
                                         read_ids_file(pred_ids), pred_grid);
            std::cout << "wrote predictions to " << pred_out << "\n";
        } else if (exportc->parsed()) {
            slidesurv::run_export_curves<Real>(exp_ckpt, exp_data, exp_out,
                                               read_ids_file(exp_ids), exp_grid);
            std::cout << "wrote curves to " << exp_out << "\n";
        }
    } catch (const slidesurv::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::domain_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
