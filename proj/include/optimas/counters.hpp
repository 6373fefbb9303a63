#pragma once

// Sparse hardware-counter selection by ensemble orthogonal matching pursuit
// over a z-scored counter matrix, plus the natural-language rendering of the
// selected counters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "optimas/error.hpp"
#include "optimas/ingest.hpp"
#include "optimas/insight.hpp"
#include "optimas/log.hpp"
#include "optimas/text.hpp"

namespace optimas::counters {

using ingest::CounterMatrix;

class AllColumnsDegenerate : public InvalidArgument {
public:
    AllColumnsDegenerate() : InvalidArgument("every counter column has zero variance") {}
};
class DimensionMismatch : public InvalidArgument {
public:
    using InvalidArgument::InvalidArgument;
};
class SingularSystem : public Error {
public:
    SingularSystem() : Error("least-squares system is singular (regularization disabled)") {}
};

// How the least-squares fit on the current support is solved.
enum class Solver {
    orthogonal, // rank-revealing complete orthogonal decomposition (exact projection)
    ridge,      // normal equations + ridge lambda = 1e-8 * trace(G) / |S|
    none,       // plain normal equations; throws SingularSystem when singular
};

struct EompConfig {
    int kappa = 5;
    int tau_pool = 5;
    int ensembles = 10;
    std::uint64_t seed = 0;
    double epsilon_stop = 1e-10;
    Solver solver = Solver::orthogonal;
};

struct NormalizedMatrix {
    Eigen::MatrixXd values;               // N x C', columns zero-mean unit population variance
    std::vector<std::string> counter_names;
    std::vector<std::string> dropped;     // zero-variance columns
    Eigen::VectorXd runtimes;             // seconds, unnormalized
};

// Z-scores each column (population variance). Constant columns are dropped
// and reported; if all are constant the matrix is unusable.
inline NormalizedMatrix zscore_normalize(const CounterMatrix& m) {
    if (m.runs() < 2) throw InvalidArgument("z-score needs at least 2 runs");
    if (m.values.size() != m.runs() * m.counters() || m.runtimes.size() != m.runs()) {
        throw DimensionMismatch("counter matrix storage does not match its dimensions");
    }
    const auto n = static_cast<Eigen::Index>(m.runs());
    NormalizedMatrix out;
    std::vector<Eigen::VectorXd> cols;
    for (std::size_t c = 0; c < m.counters(); ++c) {
        Eigen::VectorXd col(n);
        for (Eigen::Index r = 0; r < n; ++r) col[r] = m.at(static_cast<std::size_t>(r), c);
        const double mean = col.mean();
        col.array() -= mean;
        const double var = col.squaredNorm() / static_cast<double>(n);
        const double scale = std::max(1.0, std::abs(mean));
        if (!(var > 1e-24 * scale * scale)) {
            out.dropped.push_back(m.counter_names[c]);
            log::warn("counter " + m.counter_names[c] + " has zero variance and was dropped");
            continue;
        }
        col /= std::sqrt(var);
        cols.push_back(std::move(col));
        out.counter_names.push_back(m.counter_names[c]);
    }
    if (cols.empty()) throw AllColumnsDegenerate();
    out.values.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) out.values.col(static_cast<Eigen::Index>(c)) = cols[c];
    out.runtimes = Eigen::Map<const Eigen::VectorXd>(m.runtimes.data(), n);
    return out;
}

// Least-squares coefficients of t on the columns `support` of D.
inline Eigen::VectorXd fit_support(const Eigen::MatrixXd& D, const Eigen::VectorXd& t,
                                   const std::vector<Eigen::Index>& support, Solver solver) {
    Eigen::MatrixXd Ds(D.rows(), static_cast<Eigen::Index>(support.size()));
    for (std::size_t j = 0; j < support.size(); ++j) Ds.col(static_cast<Eigen::Index>(j)) = D.col(support[j]);
    switch (solver) {
    case Solver::orthogonal:
        return Ds.completeOrthogonalDecomposition().solve(t);
    case Solver::ridge: {
        Eigen::MatrixXd G = Ds.transpose() * Ds;
        const double lambda = 1e-8 * G.trace() / static_cast<double>(support.size());
        G.diagonal().array() += lambda;
        return G.ldlt().solve(Ds.transpose() * t);
    }
    case Solver::none: {
        Eigen::MatrixXd G = Ds.transpose() * Ds;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
        const auto& d = ldlt.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        if (ldlt.info() != Eigen::Success || d.cwiseAbs().minCoeff() <= 1e-13 * std::max(dmax, 1e-300)) {
            throw SingularSystem();
        }
        return ldlt.solve(Ds.transpose() * t);
    }
    }
    return {};
}

// Trace of one ensemble run: support in selection order, the residual norm
// after each selection, and the final coefficients on the support.
struct RunTrace {
    std::vector<Eigen::Index> support;
    std::vector<double> residual_norms;
    Eigen::VectorXd coefficients;
};

namespace detail {

// Uniform double in [0,1) from the raw engine output, so sampling does not
// depend on the standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::uint64_t run_seed(std::uint64_t seed, int run) {
    // splitmix64 of (seed, run)
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(run + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace detail

// One randomized OMP pass. With tau_pool = 1 it is classical OMP.
inline RunTrace eomp_run(const Eigen::MatrixXd& D, const Eigen::VectorXd& t, const EompConfig& cfg, int run_index) {
    const auto C = D.cols();
    std::mt19937_64 rng(detail::run_seed(cfg.seed, run_index));
    RunTrace trace;
    std::vector<char> in_support(static_cast<std::size_t>(C), 0);
    Eigen::VectorXd r = t;
    while (static_cast<int>(trace.support.size()) < cfg.kappa) {
        Eigen::VectorXd c = (D.transpose() * r).cwiseAbs();
        std::vector<Eigen::Index> candidates;
        for (Eigen::Index i = 0; i < C; ++i) {
            if (!in_support[static_cast<std::size_t>(i)]) candidates.push_back(i);
        }
        if (candidates.empty()) break;
        // Top tau_pool by correlation; ties to the lower index.
        const auto pool_size = std::min<std::size_t>(static_cast<std::size_t>(cfg.tau_pool), candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(pool_size),
                          candidates.end(), [&](Eigen::Index a, Eigen::Index b) {
                              if (c[a] != c[b]) return c[a] > c[b];
                              return a < b;
                          });
        if (c[candidates.front()] < cfg.epsilon_stop) break;
        candidates.resize(pool_size);

        // Sample proportional to correlation over strictly positive entries;
        // uniform when they are all equal.
        double total = 0;
        for (auto i : candidates) total += c[i];
        Eigen::Index chosen = candidates.front();
        if (pool_size > 1) {
            const bool all_equal = std::all_of(candidates.begin(), candidates.end(),
                                               [&](Eigen::Index i) { return c[i] == c[candidates.front()]; });
            const double u = detail::unit_uniform(rng);
            if (all_equal) {
                chosen = candidates[std::min(pool_size - 1, static_cast<std::size_t>(u * static_cast<double>(pool_size)))];
            } else {
                double acc = 0;
                const double target = u * total;
                chosen = candidates.back();
                for (auto i : candidates) {
                    if (!(c[i] > 0)) continue;
                    acc += c[i];
                    if (target < acc) {
                        chosen = i;
                        break;
                    }
                }
            }
        }
        trace.support.push_back(chosen);
        in_support[static_cast<std::size_t>(chosen)] = 1;
        // r = t - D_S a_S, the projection of t (not r) onto the support.
        Eigen::VectorXd a = fit_support(D, t, trace.support, cfg.solver);
        Eigen::VectorXd fitted = Eigen::VectorXd::Zero(t.size());
        for (std::size_t j = 0; j < trace.support.size(); ++j) fitted += a[static_cast<Eigen::Index>(j)] * D.col(trace.support[j]);
        r = t - fitted;
        trace.residual_norms.push_back(r.norm());
        trace.coefficients = std::move(a);
    }
    return trace;
}

struct CounterImportance {
    std::string counter_name;
    double avg_weight = 0;          // mean |coefficient| over runs, zero when unselected
    double avg_coefficient = 0;     // signed mean, zero when unselected
    double selection_frequency = 0; // fraction of runs selecting the counter
    std::string description;
    std::string diagnostic_id;      // IA-xx, assigned by describe_counters
    std::size_t column = 0;         // column in the normalized matrix
};

inline void validate(const EompConfig& cfg, Eigen::Index counters) {
    if (cfg.kappa < 1) throw InvalidArgument("kappa must be positive");
    if (cfg.tau_pool < 1) throw InvalidArgument("tau_pool must be positive");
    if (cfg.ensembles < 1) throw InvalidArgument("ensembles must be positive");
    if (!(cfg.epsilon_stop > 0)) throw InvalidArgument("epsilon_stop must be positive");
    if (cfg.kappa > counters) throw InvalidArgument("kappa exceeds the number of counters");
}

// Runs the ensemble and returns at most kappa counters sorted by average
// weight (ties by column index). Each run restarts from r = t, S = {}.
inline std::vector<CounterImportance> eomp_select(const Eigen::MatrixXd& D, const Eigen::VectorXd& t,
                                                  const std::vector<std::string>& names, const EompConfig& cfg,
                                                  std::vector<RunTrace>* traces = nullptr) {
    if (D.rows() != t.size()) throw DimensionMismatch("counter matrix rows do not match runtime vector length");
    if (static_cast<std::size_t>(D.cols()) != names.size()) throw DimensionMismatch("counter names do not match columns");
    validate(cfg, D.cols());

    const auto C = static_cast<std::size_t>(D.cols());
    std::vector<double> weight_sum(C, 0.0), coef_sum(C, 0.0);
    std::vector<int> picks(C, 0);
    for (int e = 0; e < cfg.ensembles; ++e) {
        auto trace = eomp_run(D, t, cfg, e);
        for (std::size_t j = 0; j < trace.support.size(); ++j) {
            auto col = static_cast<std::size_t>(trace.support[j]);
            const double a = trace.coefficients[static_cast<Eigen::Index>(j)];
            weight_sum[col] += std::abs(a);
            coef_sum[col] += a;
            ++picks[col];
        }
        if (traces) traces->push_back(std::move(trace));
    }

    std::vector<CounterImportance> all;
    for (std::size_t c = 0; c < C; ++c) {
        if (picks[c] == 0) continue;
        CounterImportance ci;
        ci.counter_name = names[c];
        ci.column = c;
        ci.avg_weight = weight_sum[c] / cfg.ensembles;
        ci.avg_coefficient = coef_sum[c] / cfg.ensembles;
        ci.selection_frequency = static_cast<double>(picks[c]) / cfg.ensembles;
        all.push_back(std::move(ci));
    }
    std::stable_sort(all.begin(), all.end(), [](const CounterImportance& a, const CounterImportance& b) {
        if (a.avg_weight != b.avg_weight) return a.avg_weight > b.avg_weight;
        return a.column < b.column;
    });
    if (all.size() > static_cast<std::size_t>(cfg.kappa)) all.resize(static_cast<std::size_t>(cfg.kappa));
    return all;
}

inline std::vector<CounterImportance> eomp_select(const NormalizedMatrix& m, const EompConfig& cfg) {
    return eomp_select(m.values, m.runtimes, m.counter_names, cfg);
}

// "IA-<k>: <name> \u2014 <description> (impact <weight, 3 significant digits>)".
// Assigns diagnostic ids and descriptions in place.
inline std::vector<insight::SummaryLine> describe_counters(std::vector<CounterImportance>& selection,
                                                           const std::map<std::string, std::string>& dictionary) {
    std::vector<insight::SummaryLine> out;
    for (std::size_t i = 0; i < selection.size(); ++i) {
        auto& ci = selection[i];
        auto it = dictionary.find(ci.counter_name);
        if (it == dictionary.end()) {
            log::warn("counter " + ci.counter_name + " has no dictionary entry; using its raw name");
            ci.description = ci.counter_name;
        } else {
            ci.description = it->second;
        }
        ci.diagnostic_id = text::diag_id("IA", i + 1);
        out.push_back({ci.diagnostic_id,
                       ci.counter_name + " — " + ci.description + " (impact " +
                           text::printf_format("%.3g", ci.avg_weight) + ")",
                       {},
                       {}});
    }
    return out;
}

} // namespace optimas::counters
