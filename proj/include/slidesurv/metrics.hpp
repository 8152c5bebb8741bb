#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "slidesurv/types.hpp"

// Censoring-aware evaluation: concordance, time-dependent concordance,
// IPCW Brier / integrated Brier score, Kaplan-Meier, log-rank, and
// median-risk stratification. All pure functions.

namespace slidesurv {

template <class Scalar>
struct CohortPredictions {
    std::vector<Scalar> grid;    // strictly increasing evaluation times
    MatX<Scalar> spf;            // n x |grid|, rows nonincreasing in [0,1]
    std::vector<Scalar> times;   // observed time per patient
    std::vector<int> events;     // 1 = death observed, 0 = censored

    std::size_t size() const { return times.size(); }

    // SPF of patient i at time t: linear interpolation on the grid, constant
    // extrapolation outside it.
    Scalar spf_at(std::size_t i, Scalar t) const {
        const auto row = spf.row(static_cast<Eigen::Index>(i));
        if (t <= grid.front()) return row(0);
        if (t >= grid.back()) return row(static_cast<Eigen::Index>(grid.size()) - 1);
        const auto it = std::upper_bound(grid.begin(), grid.end(), t);
        const auto hi = static_cast<std::size_t>(it - grid.begin());
        const std::size_t lo = hi - 1;
        const Scalar w = (t - grid[lo]) / (grid[hi] - grid[lo]);
        return row(static_cast<Eigen::Index>(lo)) * (Scalar(1) - w) +
               row(static_cast<Eigen::Index>(hi)) * w;
    }

    void validate() const {
        if (grid.empty() || times.size() != events.size() ||
            spf.rows() != static_cast<Eigen::Index>(times.size()) ||
            spf.cols() != static_cast<Eigen::Index>(grid.size()))
            throw std::invalid_argument("CohortPredictions: inconsistent shapes");
        for (std::size_t j = 1; j < grid.size(); ++j)
            if (!(grid[j] > grid[j - 1]))
                throw std::invalid_argument("CohortPredictions: grid not strictly increasing");
    }
};

// Harrell-style concordance: comparable pairs are (t_i < t_j, c_i = 1);
// risk ties count one half.
template <class Scalar>
Scalar concordance_index(const std::vector<Scalar>& risks, const std::vector<Scalar>& times,
                         const std::vector<int>& events) {
    const std::size_t n = times.size();
    if (risks.size() != n || events.size() != n)
        throw std::invalid_argument("concordance_index: size mismatch");
    Scalar score = Scalar(0);
    long pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (events[i] != 1) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j || !(times[i] < times[j])) continue;
            ++pairs;
            if (risks[i] > risks[j])
                score += Scalar(1);
            else if (risks[i] == risks[j])
                score += Scalar(0.5);
        }
    }
    if (pairs == 0) throw std::domain_error("concordance_index: no comparable pairs");
    return score / static_cast<Scalar>(pairs);
}

// Antolini-style time-dependent concordance on [0, tau]: a pair
// (t_i < t_j <= tau, c_i = 1) is concordant when SPF_i(t_i) < SPF_j(t_i).
template <class Scalar>
Scalar time_dependent_concordance(const CohortPredictions<Scalar>& preds, Scalar tau) {
    preds.validate();
    if (!(tau > Scalar(0)) || tau > preds.grid.back())
        throw std::invalid_argument("time_dependent_concordance: tau outside grid");
    const std::size_t n = preds.size();
    Scalar score = Scalar(0);
    long pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (preds.events[i] != 1) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            if (!(preds.times[i] < preds.times[j] && preds.times[j] <= tau)) continue;
            ++pairs;
            const Scalar si = preds.spf_at(i, preds.times[i]);
            const Scalar sj = preds.spf_at(j, preds.times[i]);
            if (si < sj)
                score += Scalar(1);
            else if (si == sj)
                score += Scalar(0.5);
        }
    }
    if (pairs == 0)
        throw std::domain_error("time_dependent_concordance: no comparable pairs below tau");
    return score / static_cast<Scalar>(pairs);
}

// Product-limit estimator with right censoring; a nonincreasing step
// function starting at 1.
template <class Scalar>
struct KmCurve {
    std::vector<Scalar> times;  // event times where the curve steps down
    std::vector<Scalar> surv;   // survival just after each step

    Scalar operator()(Scalar t) const {
        // value of the step function at t (right-continuous)
        auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return Scalar(1);
        return surv[static_cast<std::size_t>(it - times.begin()) - 1];
    }

    Scalar left_limit(Scalar t) const {
        auto it = std::lower_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return Scalar(1);
        return surv[static_cast<std::size_t>(it - times.begin()) - 1];
    }
};

template <class Scalar>
KmCurve<Scalar> kaplan_meier(const std::vector<Scalar>& times, const std::vector<int>& events) {
    const std::size_t n = times.size();
    if (n == 0 || events.size() != n) throw std::invalid_argument("kaplan_meier: empty input");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });
    KmCurve<Scalar> curve;
    Scalar s = Scalar(1);
    std::size_t at_risk = n;
    std::size_t i = 0;
    while (i < n) {
        const Scalar t = times[order[i]];
        std::size_t deaths = 0, censored = 0;
        while (i < n && times[order[i]] == t) {
            if (events[order[i]] == 1)
                ++deaths;
            else
                ++censored;
            ++i;
        }
        if (deaths > 0) {
            s *= Scalar(1) - static_cast<Scalar>(deaths) / static_cast<Scalar>(at_risk);
            curve.times.push_back(t);
            curve.surv.push_back(s);
        }
        at_risk -= deaths + censored;
    }
    return curve;
}

// Chi-square survival function with one degree of freedom.
template <class Scalar>
Scalar chi2_sf_1dof(Scalar s) {
    return std::erfc(std::sqrt(s / Scalar(2)));
}

template <class Scalar>
struct LogRankResult {
    Scalar statistic;
    Scalar p_value;
};

// Two-group log-rank test; chi-square statistic with 1 dof. With no events
// the statistic is defined as 0 (p = 1).
template <class Scalar>
LogRankResult<Scalar> log_rank(const std::vector<Scalar>& times_a, const std::vector<int>& events_a,
                               const std::vector<Scalar>& times_b,
                               const std::vector<int>& events_b) {
    if (times_a.empty() || times_b.empty()) throw std::invalid_argument("log_rank: empty group");
    std::vector<Scalar> event_times;
    for (std::size_t i = 0; i < times_a.size(); ++i)
        if (events_a[i] == 1) event_times.push_back(times_a[i]);
    for (std::size_t i = 0; i < times_b.size(); ++i)
        if (events_b[i] == 1) event_times.push_back(times_b[i]);
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

    Scalar observed_minus_expected = Scalar(0);
    Scalar variance = Scalar(0);
    for (Scalar u : event_times) {
        const auto at_risk = [u](const std::vector<Scalar>& ts) {
            return static_cast<Scalar>(std::count_if(ts.begin(), ts.end(),
                                                     [u](Scalar t) { return t >= u; }));
        };
        const auto deaths_at = [u](const std::vector<Scalar>& ts, const std::vector<int>& ev) {
            Scalar d = Scalar(0);
            for (std::size_t i = 0; i < ts.size(); ++i)
                if (ts[i] == u && ev[i] == 1) d += Scalar(1);
            return d;
        };
        const Scalar na = at_risk(times_a), nb = at_risk(times_b);
        const Scalar n = na + nb;
        if (n < Scalar(2)) continue;
        const Scalar da = deaths_at(times_a, events_a), db = deaths_at(times_b, events_b);
        const Scalar d = da + db;
        observed_minus_expected += da - d * na / n;
        variance += d * (na / n) * (nb / n) * (n - d) / (n - Scalar(1));
    }
    LogRankResult<Scalar> res;
    if (variance > Scalar(0)) {
        res.statistic = observed_minus_expected * observed_minus_expected / variance;
        res.p_value = chi2_sf_1dof(res.statistic);
    } else {
        res.statistic = Scalar(0);
        res.p_value = Scalar(1);
    }
    return res;
}

// IPCW Brier score at time t (Graf et al. weighting from the censoring KM).
// Patients whose weight is zero are excluded and counted in `excluded`.
// With `ipcw` false the unweighted variant is returned.
template <class Scalar>
Scalar brier_score(const CohortPredictions<Scalar>& preds, Scalar t, bool ipcw = true,
                   int* excluded = nullptr) {
    preds.validate();
    const std::size_t n = preds.size();
    std::vector<int> cens_events(n);
    for (std::size_t i = 0; i < n; ++i) cens_events[i] = 1 - preds.events[i];
    const KmCurve<Scalar> g = kaplan_meier(preds.times, cens_events);
    Scalar acc = Scalar(0);
    int skipped = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Scalar s = preds.spf_at(i, t);
        if (preds.times[i] <= t && preds.events[i] == 1) {
            const Scalar w = ipcw ? g.left_limit(preds.times[i]) : Scalar(1);
            if (w <= Scalar(0)) {
                ++skipped;
                continue;
            }
            acc += s * s / w;
        } else if (preds.times[i] > t) {
            const Scalar w = ipcw ? g(t) : Scalar(1);
            if (w <= Scalar(0)) {
                ++skipped;
                continue;
            }
            acc += (Scalar(1) - s) * (Scalar(1) - s) / w;
        }
        // censored at or before t contributes nothing
    }
    if (excluded) *excluded = skipped;
    return acc / static_cast<Scalar>(n);
}

// Trapezoidal integral of the Brier score over [0, tau], normalized by tau.
// Integration nodes are 0, the grid points inside (0, tau], and tau.
template <class Scalar>
Scalar integrated_brier_score(const CohortPredictions<Scalar>& preds, Scalar tau,
                              bool ipcw = true) {
    preds.validate();
    if (!(tau > Scalar(0)) || tau > preds.grid.back())
        throw std::invalid_argument("integrated_brier_score: tau outside grid");
    std::vector<Scalar> nodes{Scalar(0)};
    for (Scalar t : preds.grid)
        if (t > Scalar(0) && t <= tau) nodes.push_back(t);
    if (nodes.back() != tau) nodes.push_back(tau);
    Scalar integral = Scalar(0);
    Scalar prev_t = nodes[0];
    Scalar prev_bs = brier_score(preds, nodes[0], ipcw);
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const Scalar bs = brier_score(preds, nodes[i], ipcw);
        integral += (nodes[i] - prev_t) * (bs + prev_bs) / Scalar(2);
        prev_t = nodes[i];
        prev_bs = bs;
    }
    return integral / tau;
}

template <class Scalar>
struct RiskStratification {
    std::vector<std::size_t> high;   // risk > median
    std::vector<std::size_t> low;    // risk <= median (ties go low)
    std::vector<Scalar> risks;       // 1 - SPF(median grid time)
    Scalar median_time;
    Scalar median_risk;
};

template <class Scalar>
RiskStratification<Scalar> stratify_by_median_risk(const CohortPredictions<Scalar>& preds) {
    preds.validate();
    const std::size_t n = preds.size();
    if (n < 2) throw std::invalid_argument("stratify_by_median_risk: need at least 2 patients");
    const std::size_t gsize = preds.grid.size();
    const Scalar t_med = gsize % 2 == 1
                             ? preds.grid[gsize / 2]
                             : (preds.grid[gsize / 2 - 1] + preds.grid[gsize / 2]) / Scalar(2);
    RiskStratification<Scalar> out;
    out.median_time = t_med;
    out.risks.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.risks[i] = Scalar(1) - preds.spf_at(i, t_med);
    std::vector<Scalar> sorted = out.risks;
    std::sort(sorted.begin(), sorted.end());
    out.median_risk = n % 2 == 1 ? sorted[n / 2]
                                 : (sorted[n / 2 - 1] + sorted[n / 2]) / Scalar(2);
    for (std::size_t i = 0; i < n; ++i)
        (out.risks[i] > out.median_risk ? out.high : out.low).push_back(i);
    return out;
}

}  // namespace slidesurv
