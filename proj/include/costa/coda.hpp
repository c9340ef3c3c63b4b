#ifndef COSTA_CODA_HPP
#define COSTA_CODA_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "table.hpp"

/**
 * @file coda.hpp
 * @brief Compositional data: closure, ALR/CLR transforms, Dirichlet density,
 *        zero-pattern incidence and subcomposition re-closure.
 *
 * A composition is a vector of D proportions summing to one. Values are
 * snapped to exact zero below 1e-12 at ingestion so that downstream zero
 * detection can use exact comparison.
 */

namespace costa {

inline constexpr double kZeroSnap = 1e-12;
inline constexpr double kClosureTol = 1e-10;

struct Composition {
    std::vector<double> parts;
    std::vector<std::string> labels;   // may be empty (unnamed parts)
    bool renormalized = false;         // input failed closure and was rescaled

    int dim() const { return static_cast<int>(parts.size()); }

    double sum() const { return std::accumulate(parts.begin(), parts.end(), 0.0); }

    bool has_zero() const {
        return std::any_of(parts.begin(), parts.end(), [](double v) { return v == 0.0; });
    }

    void validate() const {
        require(dim() >= 2, "DimensionTooSmall", "composition needs D >= 2 parts");
        require(std::abs(sum() - 1.0) <= kClosureTol, "ClosureViolation",
                "parts sum to " + std::to_string(sum()));
        if (!labels.empty())
            require(static_cast<int>(labels.size()) == dim(), "DimensionMismatch",
                    "label count != part count");
    }
};

/**
 * Normalize a nonnegative vector to unit sum. Entries with magnitude below
 * the snap tolerance are treated as exact zeros before closing.
 */
inline Composition close(std::vector<double> raw,
                         std::vector<std::string> labels = {}) {
    require(raw.size() >= 2, "DimensionTooSmall", "closure needs D >= 2 parts");
    double total = 0.0;
    for (double& v : raw) {
        if (std::abs(v) < kZeroSnap) v = 0.0;
        require(v >= 0.0, "NegativeEntry", "negative part value " + std::to_string(v));
        total += v;
    }
    require(total > 0.0, "AllZeroRow", "all parts are zero");
    Composition c;
    c.parts = std::move(raw);
    for (double& v : c.parts) v /= total;
    c.labels = std::move(labels);
    return c;
}

struct CompositionMatrix {
    std::vector<Composition> rows;
    std::vector<std::string> labels;

    int n() const { return static_cast<int>(rows.size()); }
    int dim() const { return rows.empty() ? 0 : rows.front().dim(); }

    void validate() const {
        require(!rows.empty(), "EmptyTable", "no observations");
        const int D = rows.front().dim();
        for (const auto& r : rows) {
            r.validate();
            require(r.dim() == D, "DimensionMismatch", "ragged composition matrix");
        }
    }
};

struct IncidenceMatrix {
    Eigen::MatrixXi entries;   // n x D of {0,1}

    int n() const { return static_cast<int>(entries.rows()); }
    int dim() const { return static_cast<int>(entries.cols()); }
};

enum class LogratioKind { ALR, CLR };

struct LogratioMatrix {
    Eigen::MatrixXd values;                // n x k
    LogratioKind kind = LogratioKind::CLR;
    int ref_index = -1;                    // ALR reference part (0-based); -1 for CLR
    std::vector<std::string> source_labels;

    void validate() const {
        if (kind == LogratioKind::ALR) {
            require(ref_index >= 0, "InvalidReference", "ALR matrix without reference");
            if (!source_labels.empty())
                require(values.cols() + 1 == static_cast<long>(source_labels.size()),
                        "DimensionMismatch", "ALR must have k = D - 1 columns");
        } else {
            for (int i = 0; i < values.rows(); ++i)
                require(std::abs(values.row(i).sum()) <= kClosureTol, "NotCentered",
                        "CLR row " + std::to_string(i) + " does not sum to zero");
        }
    }
};

struct DirichletParams {
    std::vector<double> alpha;

    int dim() const { return static_cast<int>(alpha.size()); }
    double alpha0() const { return std::accumulate(alpha.begin(), alpha.end(), 0.0); }

    void validate() const {
        require(dim() >= 2, "DimensionTooSmall", "Dirichlet needs D >= 2");
        for (double a : alpha)
            require(a > 0.0, "ParameterOutOfRange", "alpha must be positive");
    }
};

namespace detail {
inline void require_interior(const Composition& y, const char* who) {
    for (double v : y.parts)
        require(v > 0.0, "ZeroPart", std::string(who) + " requires strictly positive parts");
}
} // namespace detail

/** Additive logratio with respect to reference part `ref` (0-based). */
inline Eigen::VectorXd alr(const Composition& y, int ref) {
    require(ref >= 0 && ref < y.dim(), "InvalidReference",
            "ALR reference out of range");
    detail::require_interior(y, "alr");
    Eigen::VectorXd out(y.dim() - 1);
    const double log_ref = std::log(y.parts[ref]);
    int k = 0;
    for (int i = 0; i < y.dim(); ++i) {
        if (i == ref) continue;
        out[k++] = std::log(y.parts[i]) - log_ref;
    }
    return out;
}

/** Centred logratio: log of parts over their geometric mean; sums to zero. */
inline Eigen::VectorXd clr(const Composition& y) {
    detail::require_interior(y, "clr");
    Eigen::VectorXd logs(y.dim());
    for (int i = 0; i < y.dim(); ++i) logs[i] = std::log(y.parts[i]);
    return logs.array() - logs.mean();
}

/** Inverse ALR: insert zero at the reference slot and softmax. */
inline Composition inv_alr(const Eigen::VectorXd& v, int ref) {
    const int D = static_cast<int>(v.size()) + 1;
    require(ref >= 0 && ref < D, "InvalidReference", "ALR reference out of range");
    for (int i = 0; i < v.size(); ++i)
        require(std::isfinite(v[i]), "NonFiniteInput", "logratio must be finite");
    Eigen::VectorXd ext(D);
    int k = 0;
    for (int i = 0; i < D; ++i) ext[i] = (i == ref) ? 0.0 : v[k++];
    const double m = ext.maxCoeff();
    Eigen::VectorXd e = (ext.array() - m).exp();
    e /= e.sum();
    Composition c;
    c.parts.assign(e.data(), e.data() + D);
    return c;
}

/**
 * Inverse CLR: softmax of a (approximately) zero-sum vector. Inputs off
 * centre by more than 1e-8 are rejected; smaller drift is re-centred first.
 */
inline Composition inv_clr(const Eigen::VectorXd& v) {
    require(v.size() >= 2, "DimensionTooSmall", "inverse CLR needs D >= 2");
    require(std::abs(v.sum()) <= 1e-8, "NotCentered",
            "CLR vector sums to " + std::to_string(v.sum()));
    Eigen::VectorXd centred = v.array() - v.mean();
    const double m = centred.maxCoeff();
    Eigen::VectorXd e = (centred.array() - m).exp();
    e /= e.sum();
    Composition c;
    c.parts.assign(e.data(), e.data() + e.size());
    return c;
}

/** Exact zero pattern: entry 0 iff the composition value is 0. */
inline IncidenceMatrix incidence(const CompositionMatrix& Y) {
    IncidenceMatrix I;
    I.entries.resize(Y.n(), Y.dim());
    for (int i = 0; i < Y.n(); ++i)
        for (int j = 0; j < Y.dim(); ++j)
            I.entries(i, j) = Y.rows[i].parts[j] == 0.0 ? 0 : 1;
    return I;
}

/** Re-close the kept parts (0-based indices) to a subcomposition. */
inline Composition reclose_subcomposition(const Composition& y,
                                          const std::vector<int>& keep) {
    require(!keep.empty(), "EmptySubcomposition", "empty keep set");
    std::vector<double> parts;
    std::vector<std::string> labels;
    double total = 0.0;
    for (int idx : keep) {
        require(idx >= 0 && idx < y.dim(), "InvalidReference", "keep index out of range");
        require(y.parts[idx] > 0.0, "ZeroPart", "kept part is zero");
        parts.push_back(y.parts[idx]);
        if (!y.labels.empty()) labels.push_back(y.labels[idx]);
        total += y.parts[idx];
    }
    require(parts.size() >= 1, "EmptySubcomposition", "empty keep set");
    // A one-part "subcomposition" is the degenerate unit vector; callers that
    // need logratios must check dim() >= 2 themselves.
    for (double& p : parts) p /= total;
    Composition c;
    c.parts = std::move(parts);
    c.labels = std::move(labels);
    return c;
}

/** Log multinomial Beta function log B(alpha). */
inline double log_multinomial_beta(const DirichletParams& p) {
    double s = 0.0;
    for (double a : p.alpha) s += std::lgamma(a);
    return s - std::lgamma(p.alpha0());
}

inline double dirichlet_logpdf(const Composition& y, const DirichletParams& p) {
    p.validate();
    require(y.dim() == p.dim(), "DimensionMismatch", "composition/alpha dims differ");
    detail::require_interior(y, "dirichlet_logpdf");
    double s = -log_multinomial_beta(p);
    for (int i = 0; i < y.dim(); ++i)
        s += (p.alpha[i] - 1.0) * std::log(y.parts[i]);
    return s;
}

inline Composition dirichlet_mean(const DirichletParams& p) {
    p.validate();
    const double a0 = p.alpha0();
    Composition c;
    c.parts.resize(p.dim());
    for (int i = 0; i < p.dim(); ++i) c.parts[i] = p.alpha[i] / a0;
    return c;
}

// ---------------------------------------------------------------------------
// Matrix-level helpers and file ingestion
// ---------------------------------------------------------------------------

inline LogratioMatrix clr_matrix(const CompositionMatrix& Y) {
    LogratioMatrix out;
    out.kind = LogratioKind::CLR;
    out.source_labels = Y.labels;
    out.values.resize(Y.n(), Y.dim());
    for (int i = 0; i < Y.n(); ++i) out.values.row(i) = clr(Y.rows[i]);
    return out;
}

inline LogratioMatrix alr_matrix(const CompositionMatrix& Y, int ref) {
    LogratioMatrix out;
    out.kind = LogratioKind::ALR;
    out.ref_index = ref;
    out.source_labels = Y.labels;
    out.values.resize(Y.n(), Y.dim() - 1);
    for (int i = 0; i < Y.n(); ++i) out.values.row(i) = alr(Y.rows[i], ref);
    return out;
}

/**
 * Ingest a composition table: one row per observation, one column per part,
 * header row carries the part labels. Rows failing closure by more than the
 * tolerance are renormalized and flagged rather than rejected.
 */
inline CompositionMatrix read_composition_matrix(const Table& t) {
    require(t.ncol() >= 2, "DimensionTooSmall", "need at least two part columns");
    CompositionMatrix Y;
    Y.labels = t.columns;
    for (int i = 0; i < t.nrow(); ++i) {
        Composition c = close(t.rows[i], t.columns);
        c.renormalized = std::abs(std::accumulate(t.rows[i].begin(), t.rows[i].end(), 0.0) - 1.0) > kClosureTol;
        Y.rows.push_back(std::move(c));
    }
    Y.validate();
    return Y;
}

inline CompositionMatrix read_composition_file(const std::string& path) {
    return read_composition_matrix(read_table_file(path));
}

inline Table to_table(const CompositionMatrix& Y) {
    Table t;
    t.columns = Y.labels;
    if (t.columns.empty())
        for (int j = 0; j < Y.dim(); ++j) t.columns.push_back("part" + std::to_string(j + 1));
    for (const auto& r : Y.rows) t.add_row(r.parts);
    return t;
}

/** Logratio matrices carry kind and reference in a leading comment line. */
inline Table to_table(const LogratioMatrix& L) {
    Table t;
    std::ostringstream meta;
    meta << "kind=" << (L.kind == LogratioKind::ALR ? "ALR" : "CLR");
    if (L.kind == LogratioKind::ALR) meta << " ref=" << L.ref_index;
    t.comments.push_back(meta.str());
    for (int j = 0; j < L.values.cols(); ++j) t.columns.push_back("lr" + std::to_string(j + 1));
    for (int i = 0; i < L.values.rows(); ++i) {
        std::vector<double> row(L.values.cols());
        for (int j = 0; j < L.values.cols(); ++j) row[j] = L.values(i, j);
        t.rows.push_back(std::move(row));
    }
    return t;
}

} // namespace costa

#endif
