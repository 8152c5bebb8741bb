#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slidesurv/rng.hpp"
#include "slidesurv/types.hpp"

// Feature-bag file format, survival label ingestion, synthetic cohort
// generation with a planted prognostic signal, and deterministic k-fold
// splits.
//
// On-disk bag layout (one directory per slide):
//   meta.json      {"slide_id", "n_patches", "feature_dim", "patch_size", "units"}
//   features.bin   little-endian float32, row-major n_patches x feature_dim
//   coords.bin     little-endian float32, n_patches x 2

namespace slidesurv {

static_assert(std::endian::native == std::endian::little,
              "bag format assumes a little-endian host");

enum class DataErrorKind { MissingFile, SizeMismatch, NonFinite, BadFormat };

class DataError : public std::runtime_error {
public:
    DataError(DataErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    DataErrorKind kind() const { return kind_; }

private:
    DataErrorKind kind_;
};

template <class Scalar>
struct SlideBag {
    std::string slide_id;
    MatX<Scalar> features;  // n x d
    MatX<Scalar> coords;    // n x 2
    int patch_size = 256;
    std::string units = "pixels";
};

struct SurvivalLabel {
    std::string slide_id;
    double time = 0.0;  // > 0, in the cohort's declared unit
    int event = 0;      // 1 = death observed
};

namespace detail {

inline std::vector<float> read_f32_file(const std::filesystem::path& path,
                                        std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(DataErrorKind::MissingFile, "missing file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != expected_count * sizeof(float))
        throw DataError(DataErrorKind::SizeMismatch,
                        "size mismatch in " + path.string() + ": expected " +
                            std::to_string(expected_count * sizeof(float)) + " bytes, found " +
                            std::to_string(bytes));
    in.seekg(0, std::ios::beg);
    std::vector<float> data(expected_count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError(DataErrorKind::BadFormat, "short read on " + path.string());
    return data;
}

inline void write_f32_file(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(DataErrorKind::MissingFile, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
}

}  // namespace detail

template <class Scalar>
SlideBag<Scalar> load_slide(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    std::ifstream meta_in(meta_path);
    if (!meta_in)
        throw DataError(DataErrorKind::MissingFile, "missing file: " + meta_path.string());
    nlohmann::json meta;
    try {
        meta_in >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(DataErrorKind::BadFormat,
                        "bad meta.json in " + dir.string() + ": " + e.what());
    }
    SlideBag<Scalar> bag;
    try {
        bag.slide_id = meta.at("slide_id").get<std::string>();
        bag.patch_size = meta.value("patch_size", 256);
        bag.units = meta.value("units", std::string("pixels"));
        const auto n = meta.at("n_patches").get<std::size_t>();
        const auto d = meta.at("feature_dim").get<std::size_t>();
        if (n == 0 || d == 0)
            throw DataError(DataErrorKind::BadFormat, "empty bag in " + dir.string());
        const auto feats = detail::read_f32_file(dir / "features.bin", n * d);
        const auto coords = detail::read_f32_file(dir / "coords.bin", n * 2);
        bag.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        bag.coords.resize(static_cast<Eigen::Index>(n), 2);
        for (std::size_t i = 0; i < n * d; ++i)
            bag.features.data()[i] = static_cast<Scalar>(feats[i]);
        for (std::size_t i = 0; i < n * 2; ++i)
            bag.coords.data()[i] = static_cast<Scalar>(coords[i]);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(DataErrorKind::BadFormat,
                        "bad meta.json in " + dir.string() + ": " + e.what());
    }
    if (!bag.features.allFinite() || !bag.coords.allFinite())
        throw DataError(DataErrorKind::NonFinite, "non-finite values in " + dir.string());
    return bag;
}

template <class Scalar>
void write_slide_bag(const std::filesystem::path& dir, const SlideBag<Scalar>& bag) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta{{"slide_id", bag.slide_id},
                        {"n_patches", bag.features.rows()},
                        {"feature_dim", bag.features.cols()},
                        {"patch_size", bag.patch_size},
                        {"units", bag.units}};
    std::ofstream meta_out(dir / "meta.json");
    meta_out << meta.dump(2) << "\n";
    std::vector<float> feats(static_cast<std::size_t>(bag.features.size()));
    for (std::size_t i = 0; i < feats.size(); ++i)
        feats[i] = static_cast<float>(bag.features.data()[i]);
    detail::write_f32_file(dir / "features.bin", feats);
    std::vector<float> coords(static_cast<std::size_t>(bag.coords.size()));
    for (std::size_t i = 0; i < coords.size(); ++i)
        coords[i] = static_cast<float>(bag.coords.data()[i]);
    detail::write_f32_file(dir / "coords.bin", coords);
}

// ---- label table (CSV: slide_id,time,event) ----

inline std::vector<SurvivalLabel> load_labels(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(DataErrorKind::MissingFile, "missing file: " + path.string());
    std::vector<SurvivalLabel> labels;
    std::string line;
    bool header = true;
    std::size_t lineno = 0;
    std::map<std::string, bool> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (header) {
            if (line != "slide_id,time,event")
                throw DataError(DataErrorKind::BadFormat,
                                "expected header 'slide_id,time,event' in " + path.string());
            header = false;
            continue;
        }
        std::stringstream ss(line);
        SurvivalLabel lbl;
        std::string time_s, event_s;
        if (!std::getline(ss, lbl.slide_id, ',') || !std::getline(ss, time_s, ',') ||
            !std::getline(ss, event_s))
            throw DataError(DataErrorKind::BadFormat,
                            "bad label row " + std::to_string(lineno) + " in " + path.string());
        try {
            lbl.time = std::stod(time_s);
            lbl.event = std::stoi(event_s);
        } catch (const std::exception&) {
            throw DataError(DataErrorKind::BadFormat,
                            "bad label row " + std::to_string(lineno) + " in " + path.string());
        }
        if (!(lbl.time > 0.0) || (lbl.event != 0 && lbl.event != 1))
            throw DataError(DataErrorKind::BadFormat,
                            "invalid time/event in row " + std::to_string(lineno) + " of " +
                                path.string());
        if (seen[lbl.slide_id])
            throw DataError(DataErrorKind::BadFormat,
                            "duplicate slide_id '" + lbl.slide_id + "' in " + path.string());
        seen[lbl.slide_id] = true;
        labels.push_back(std::move(lbl));
    }
    if (labels.empty())
        throw DataError(DataErrorKind::BadFormat, "no labels in " + path.string());
    return labels;
}

inline void write_labels(const std::filesystem::path& path,
                         const std::vector<SurvivalLabel>& labels,
                         const std::string& time_unit = "days") {
    std::ofstream out(path);
    out << "# time unit: " << time_unit << "\n";
    out << "slide_id,time,event\n";
    out.precision(17);
    for (const auto& l : labels) out << l.slide_id << "," << l.time << "," << l.event << "\n";
}

// ---- synthetic cohort with planted prognostic signal ----

struct SynthConfig {
    int n_slides = 200;
    int min_patches = 96;
    int max_patches = 160;
    int feature_dim = 32;
    int phenotypes = 4;          // one aggressive + neutrals (background is extra)
    double effect_size = 2.0;    // beta: risk = beta * aggressive fraction
    double censoring_fraction = 0.3;
    double mean_event_time = 1000.0;  // days
    double background_fraction = 0.25;
    double feature_noise = 1.4;
    double weibull_shape = 2.0;
    std::uint64_t seed = 1;
};

template <class Scalar>
struct SyntheticCohort {
    std::vector<SlideBag<Scalar>> bags;
    std::vector<SurvivalLabel> labels;
    std::vector<double> true_risks;        // beta * aggressive fraction per slide
    std::vector<double> true_event_rates;  // Weibull scale^-shape per slide (for oracle curves)
    double weibull_shape = 2.0;
};

// Patches are drawn from phenotype-specific Gaussian feature prototypes
// placed in spatial blobs; per-slide true risk is beta times the aggressive
// fraction among informative patches. A background phenotype with heavy
// feature noise mimics non-informative tissue. Event times follow an
// accelerated-failure-time law T = exp(-risk) * W with W Weibull-distributed
// (shape 2), scaled so the mean event time matches the configured target;
// censoring times are uniform fractions of the event time on a random subset
// of slides sized to the configured censoring fraction.
template <class Scalar>
SyntheticCohort<Scalar> generate_synthetic_cohort(const SynthConfig& cfg) {
    if (cfg.censoring_fraction < 0.0 || cfg.censoring_fraction >= 1.0)
        throw std::invalid_argument("generate_synthetic_cohort: censoring fraction in [0,1)");
    if (cfg.n_slides < 1 || cfg.phenotypes < 2 || cfg.min_patches < 4 ||
        cfg.max_patches < cfg.min_patches)
        throw std::invalid_argument("generate_synthetic_cohort: bad config");
    Rng rng(cfg.seed);
    const int d = cfg.feature_dim;

    // Phenotype prototypes: index 0 is aggressive, last is background.
    const int n_protos = cfg.phenotypes + 1;
    MatX<Scalar> protos(n_protos, d);
    for (int p = 0; p < n_protos; ++p)
        for (int j = 0; j < d; ++j) protos(p, j) = static_cast<Scalar>(rng.normal() * 2.0);

    SyntheticCohort<Scalar> cohort;
    cohort.weibull_shape = cfg.weibull_shape;
    std::vector<double> raw_event_times(static_cast<std::size_t>(cfg.n_slides));
    for (int s = 0; s < cfg.n_slides; ++s) {
        Rng srng = rng.child(static_cast<std::uint64_t>(s) + 1);
        const int n_patches =
            cfg.min_patches +
            static_cast<int>(srng.uniform_index(
                static_cast<std::uint64_t>(cfg.max_patches - cfg.min_patches + 1)));
        const int n_background =
            static_cast<int>(std::lround(cfg.background_fraction * n_patches));
        const int n_informative = n_patches - n_background;

        // aggressive fraction ~ Beta(0.5, 0.5) via inverse arcsine sampling
        const double u = srng.uniform();
        const double frac = 0.5 - 0.5 * std::cos(3.14159265358979323846 * u);
        const int n_aggr = static_cast<int>(std::lround(frac * n_informative));
        cohort.true_risks.push_back(cfg.effect_size *
                                    static_cast<double>(n_aggr) / n_informative);

        // spatial blob centers per phenotype
        MatX<Scalar> blob_centers(n_protos, 2);
        for (int p = 0; p < n_protos; ++p) {
            blob_centers(p, 0) = static_cast<Scalar>(srng.uniform(0.0, 10000.0));
            blob_centers(p, 1) = static_cast<Scalar>(srng.uniform(0.0, 10000.0));
        }

        SlideBag<Scalar> bag;
        bag.slide_id = "synth" + std::string(6 - std::to_string(s).size(), '0') +
                       std::to_string(s);
        bag.features.resize(n_patches, d);
        bag.coords.resize(n_patches, 2);
        int row = 0;
        auto emit_patch = [&](int proto, double noise) {
            for (int j = 0; j < d; ++j)
                bag.features(row, j) = static_cast<Scalar>(
                    static_cast<double>(protos(proto, j)) + noise * srng.normal());
            bag.coords(row, 0) = static_cast<Scalar>(
                static_cast<double>(blob_centers(proto, 0)) + 300.0 * srng.normal());
            bag.coords(row, 1) = static_cast<Scalar>(
                static_cast<double>(blob_centers(proto, 1)) + 300.0 * srng.normal());
            ++row;
        };
        for (int i = 0; i < n_aggr; ++i) emit_patch(0, cfg.feature_noise);
        for (int i = n_aggr; i < n_informative; ++i) {
            const int proto =
                1 + static_cast<int>(srng.uniform_index(
                        static_cast<std::uint64_t>(cfg.phenotypes - 1)));
            emit_patch(proto, cfg.feature_noise);
        }
        for (int i = 0; i < n_background; ++i) emit_patch(n_protos - 1, 4.0 * cfg.feature_noise);

        // snap to the file format's float32 so write/load round-trips exactly
        for (Eigen::Index i = 0; i < bag.features.size(); ++i)
            bag.features.data()[i] =
                static_cast<Scalar>(static_cast<float>(bag.features.data()[i]));
        for (Eigen::Index i = 0; i < bag.coords.size(); ++i)
            bag.coords.data()[i] = static_cast<Scalar>(static_cast<float>(bag.coords.data()[i]));
        cohort.bags.push_back(std::move(bag));

        // Weibull(shape k, scale 1) via inverse CDF, then AFT scaling
        const double w = std::pow(-std::log(1.0 - srng.uniform()), 1.0 / cfg.weibull_shape);
        raw_event_times[static_cast<std::size_t>(s)] =
            std::exp(-cohort.true_risks.back()) * w;
    }

    // scale times so the mean event time hits the configured target
    const double raw_mean =
        std::accumulate(raw_event_times.begin(), raw_event_times.end(), 0.0) /
        static_cast<double>(cfg.n_slides);
    const double time_scale = cfg.mean_event_time / raw_mean;
    for (int s = 0; s < cfg.n_slides; ++s) {
        const double scaled = raw_event_times[static_cast<std::size_t>(s)] * time_scale;
        cohort.true_event_rates.push_back(
            std::exp(cfg.weibull_shape * cohort.true_risks[static_cast<std::size_t>(s)]) /
            std::pow(time_scale, cfg.weibull_shape));
        SurvivalLabel lbl;
        lbl.slide_id = cohort.bags[static_cast<std::size_t>(s)].slide_id;
        lbl.time = scaled;
        lbl.event = 1;
        cohort.labels.push_back(lbl);
    }

    // censor a deterministic random subset at a uniform fraction of its event time
    const int n_cens = static_cast<int>(std::lround(cfg.censoring_fraction * cfg.n_slides));
    std::vector<int> ids(static_cast<std::size_t>(cfg.n_slides));
    std::iota(ids.begin(), ids.end(), 0);
    rng.shuffle(ids);
    for (int i = 0; i < n_cens; ++i) {
        auto& lbl = cohort.labels[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])];
        lbl.time *= rng.uniform(0.05, 0.95);
        lbl.event = 0;
    }
    return cohort;
}

// Oracle survival curves S_i(t) = exp(-rate_i * t^shape) for the generator's
// planted AFT law, used to gate the generator itself.
template <class Scalar>
MatX<Scalar> oracle_spf_matrix(const SyntheticCohort<Scalar>& cohort,
                               const std::vector<Scalar>& grid) {
    MatX<Scalar> spf(static_cast<Eigen::Index>(cohort.true_event_rates.size()),
                     static_cast<Eigen::Index>(grid.size()));
    for (std::size_t i = 0; i < cohort.true_event_rates.size(); ++i)
        for (std::size_t j = 0; j < grid.size(); ++j)
            spf(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                static_cast<Scalar>(std::exp(-cohort.true_event_rates[i] *
                                             std::pow(static_cast<double>(grid[j]),
                                                      cohort.weibull_shape)));
    return spf;
}

// ---- deterministic k-fold splits ----

struct FoldSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
};

inline std::vector<FoldSplit> kfold_splits(std::vector<std::string> slide_ids, int k,
                                           std::uint64_t seed) {
    const auto n = static_cast<int>(slide_ids.size());
    if (k < 1 || k > n) throw std::invalid_argument("kfold_splits: need 1 <= k <= n_slides");
    Rng rng(seed);
    rng.shuffle(slide_ids);
    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i) {
        const int fold = i % k;
        for (int f = 0; f < k; ++f)
            (f == fold ? folds[static_cast<std::size_t>(f)].val_ids
                       : folds[static_cast<std::size_t>(f)].train_ids)
                .push_back(slide_ids[static_cast<std::size_t>(i)]);
    }
    return folds;
}

}  // namespace slidesurv
