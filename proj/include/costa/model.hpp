#ifndef COSTA_MODEL_HPP
#define COSTA_MODEL_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "graph_precision.hpp"
#include "likelihood.hpp"
#include "table.hpp"

/**
 * @file model.hpp
 * @brief Declarative latent Gaussian model specs and their assembly into one
 *        joint system: a named latent layout, a hyperparameter registry on
 *        transformed scales, per-block observation maps, and the joint prior
 *        precision builder.
 *
 * Random-effect structure matrices are supplied as builder callbacks over the
 * natural values of their declared hyperparameters, so one latent slice can
 * realize any of the precision constructions (and shared or replicated terms
 * are expressed through the observation maps that point at it).
 */

namespace costa {

enum class Transform { Identity, Log, LogitUnit, LogitSigned };

inline double to_natural(Transform t, double theta) {
    switch (t) {
        case Transform::Identity: return theta;
        case Transform::Log: return std::exp(theta);
        case Transform::LogitUnit: return logistic(theta);
        case Transform::LogitSigned: return 2.0 * logistic(theta) - 1.0;
    }
    return theta;
}

inline double to_transformed(Transform t, double natural) {
    switch (t) {
        case Transform::Identity: return natural;
        case Transform::Log: return std::log(natural);
        case Transform::LogitUnit: return logit(natural);
        case Transform::LogitSigned: return logit(0.5 * (natural + 1.0));
    }
    return natural;
}

/** One hyperparameter slot; bounds and init live on the transformed scale. */
struct HyperDecl {
    std::string name;
    Transform transform = Transform::Log;
    double lo = -6.0;
    double hi = 10.0;
    double init = 0.0;
    bool fixed = false;

    void validate() const {
        require(lo < hi, "SpecError", "hyper " + name + ": lo must be < hi");
        require(init >= lo && init <= hi, "SpecError",
                "hyper " + name + ": init outside bounds");
    }
};

/**
 * A random-effect latent slice with its precision builder. A replica names an
 * earlier term in share_hypers_with: it keeps its own latent slice but its
 * builder consumes the source term's hyperparameter slots.
 */
struct RandomTermSpec {
    std::string name;
    int size = 0;
    std::vector<HyperDecl> hypers;
    std::string share_hypers_with;
    std::function<SparsePrecision(const std::vector<double>&)> build;
    std::vector<Eigen::VectorXd> constraints;   // local rows, each length == size

    void validate() const {
        require(size >= 1, "SpecError", "term " + name + ": size must be >= 1");
        require(static_cast<bool>(build), "SpecError",
                "term " + name + ": missing precision builder");
        require(share_hypers_with.empty() || hypers.empty(), "SpecError",
                "term " + name + ": replica cannot declare its own hypers");
        for (const auto& h : hypers) h.validate();
        for (const auto& c : constraints)
            require(c.size() == size, "SpecError",
                    "term " + name + ": constraint length != size");
    }
};

/** Fixed-effect design columns of one block, referencing global coefficients. */
struct FixedDesign {
    std::vector<std::string> coef_names;
    Eigen::MatrixXd X;   // n_pred_rows x coef_names.size()
};

/** Maps a block's predictor rows onto one random-effect slice. */
struct TermBinding {
    std::string term;
    Eigen::SparseMatrix<double> map;   // n_pred_rows x term_size
    int scale_hyper = -1;              // block-local hyper index, -1 = unscaled
};

struct ObsBlockSpec {
    std::string name;
    Family family = Family::GaussianFixedPrecision;
    Eigen::VectorXd y;        // Beta / Bernoulli / Gaussian responses
    Eigen::MatrixXd ycomp;    // Dirichlet compositions, n_obs x D
    FixedDesign fixed;
    std::vector<TermBinding> bindings;
    Eigen::VectorXd offset;   // length n_pred_rows, or empty for zeros
    std::vector<HyperDecl> hypers;     // block-local (family param, binding scales)
    int family_hyper = -1;             // local hyper index of phi / log tau
    double fixed_family_value = kDefaultLogTauStar;  // phi, or log tau*

    int n_obs() const {
        return family == Family::Dirichlet ? static_cast<int>(ycomp.rows())
                                           : static_cast<int>(y.size());
    }
    int rows_per_obs() const {
        return family == Family::Dirichlet ? static_cast<int>(ycomp.cols()) : 1;
    }
    int n_pred_rows() const { return n_obs() * rows_per_obs(); }
};

struct ModelSpec {
    std::vector<RandomTermSpec> terms;
    std::vector<ObsBlockSpec> blocks;
    double fixed_prior_precision = 0.001;
    // Optional informative coefficient prior N(mean, precision^-1); empty means
    // the zero-mean scalar-precision default. Used to chain posteriors forward.
    Eigen::VectorXd beta_prior_mean;
    Eigen::MatrixXd beta_prior_precision;
};

/** Build a dense design matrix from data columns; "1" is the intercept. */
inline Eigen::MatrixXd make_design(const Table& data,
                                   const std::vector<std::string>& names) {
    Eigen::MatrixXd X(data.nrow(), static_cast<long>(names.size()));
    for (size_t c = 0; c < names.size(); ++c) {
        if (names[c] == "1") {
            X.col(static_cast<long>(c)).setOnes();
            continue;
        }
        const int idx = data.column_index(names[c]);
        require(idx >= 0, "SpecError",
                "design column '" + names[c] + "' not found in data");
        for (int r = 0; r < data.nrow(); ++r)
            X(r, static_cast<long>(c)) = data.rows[r][idx];
    }
    return X;
}

// ---------------------------------------------------------------------------
// Assembled system
// ---------------------------------------------------------------------------

struct Slice {
    std::string name;
    int offset = 0;
    int size = 0;
};

struct Layout {
    std::vector<Slice> slices;
    int dim = 0;

    const Slice& at(const std::string& name) const {
        for (const auto& s : slices)
            if (s.name == name) return s;
        fail("SpecError", "unknown latent slice '" + name + "'");
    }
};

struct LatentSystem {
    Layout layout;                       // slice 0 is "beta" (may be size 0)
    std::vector<std::string> coef_names;
    double fixed_prior_precision = 0.001;
    Eigen::VectorXd beta_prior_mean;       // empty: zero mean
    Eigen::MatrixXd beta_prior_precision;  // empty: scalar default diag

    std::vector<HyperDecl> hypers;       // global registry, declaration order
    std::vector<std::vector<int>> term_hyper_index;   // per term -> global idx

    struct AsmBinding {
        std::vector<Eigen::Triplet<double>> trip;   // global columns
        int scale_hyper = -1;                       // global theta index
    };

    struct AsmBlock {
        std::string name;
        Family family = Family::GaussianFixedPrecision;
        Eigen::VectorXd y;
        Eigen::MatrixXd ycomp;
        int n_obs = 0;
        int rows_per_obs = 1;
        int row_offset = 0;
        Eigen::VectorXd offset;
        std::vector<Eigen::Triplet<double>> fixed_trip;   // constant part of A
        std::vector<AsmBinding> bindings;
        int family_hyper = -1;                            // global theta index
        double fixed_family_value = kDefaultLogTauStar;
    };

    std::vector<RandomTermSpec> terms;
    std::vector<AsmBlock> blocks;
    int total_pred_rows = 0;
    Eigen::MatrixXd constraints;   // k x dim (k may be 0)

    int latent_dim() const { return layout.dim; }
    int n_hypers() const { return static_cast<int>(hypers.size()); }

    std::vector<int> free_hypers() const {
        std::vector<int> out;
        for (int i = 0; i < n_hypers(); ++i)
            if (!hypers[i].fixed) out.push_back(i);
        return out;
    }

    Eigen::VectorXd theta_init() const {
        Eigen::VectorXd t(n_hypers());
        for (int i = 0; i < n_hypers(); ++i) t[i] = hypers[i].init;
        return t;
    }

    double natural(const Eigen::VectorXd& theta, int i) const {
        return to_natural(hypers[i].transform, theta[i]);
    }

    /** Sparse observation map; binding scales are read from theta. */
    Eigen::SparseMatrix<double> build_A(const Eigen::VectorXd& theta) const {
        std::vector<Eigen::Triplet<double>> trip;
        for (const auto& b : blocks) {
            trip.insert(trip.end(), b.fixed_trip.begin(), b.fixed_trip.end());
            for (const auto& bind : b.bindings) {
                const double s =
                    bind.scale_hyper < 0 ? 1.0 : natural(theta, bind.scale_hyper);
                for (const auto& t : bind.trip)
                    trip.emplace_back(t.row(), t.col(), s * t.value());
            }
        }
        Eigen::SparseMatrix<double> A(total_pred_rows, latent_dim());
        A.setFromTriplets(trip.begin(), trip.end());
        A.makeCompressed();
        return A;
    }

    Eigen::VectorXd stacked_offset() const {
        Eigen::VectorXd off = Eigen::VectorXd::Zero(total_pred_rows);
        for (const auto& b : blocks)
            if (b.offset.size() > 0)
                off.segment(b.row_offset, b.offset.size()) = b.offset;
        return off;
    }

    /**
     * Joint prior precision at theta. Intrinsic term blocks get a relative
     * diagonal jitter so the factorization exists; the matching sum-to-zero
     * constraints remove the null directions exactly.
     */
    Eigen::SparseMatrix<double> build_Q_prior(const Eigen::VectorXd& theta) const {
        std::vector<Eigen::Triplet<double>> trip;
        const int n_beta = layout.slices[0].size;
        if (beta_prior_precision.size() > 0) {
            for (int i = 0; i < n_beta; ++i)
                for (int j = 0; j < n_beta; ++j)
                    if (beta_prior_precision(i, j) != 0.0)
                        trip.emplace_back(i, j, beta_prior_precision(i, j));
        } else {
            for (int i = 0; i < n_beta; ++i)
                trip.emplace_back(i, i, fixed_prior_precision);
        }
        for (size_t t = 0; t < terms.size(); ++t) {
            const Slice& s = layout.slices[t + 1];
            std::vector<double> nat;
            for (int gi : term_hyper_index[t]) nat.push_back(natural(theta, gi));
            SparsePrecision Q = terms[t].build(nat);
            require(Q.dim() == s.size, "SpecError",
                    "term " + terms[t].name + ": builder dimension mismatch");
            double diag_mean = 0.0;
            for (int i = 0; i < Q.dim(); ++i) diag_mean += Q.Q.coeff(i, i);
            diag_mean /= Q.dim();
            for (int k = 0; k < Q.Q.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(Q.Q, k); it; ++it)
                    trip.emplace_back(s.offset + static_cast<int>(it.row()),
                                      s.offset + static_cast<int>(it.col()),
                                      it.value());
            if (Q.rank_deficiency > 0)
                for (int i = 0; i < Q.dim(); ++i)
                    trip.emplace_back(s.offset + i, s.offset + i, 1e-6 * diag_mean);
        }
        Eigen::SparseMatrix<double> Qp(latent_dim(), latent_dim());
        Qp.setFromTriplets(trip.begin(), trip.end());
        Qp.makeCompressed();
        return Qp;
    }

    /** Prior mean of the latent field: zero except an informative beta prior. */
    Eigen::VectorXd prior_mean() const {
        Eigen::VectorXd m = Eigen::VectorXd::Zero(latent_dim());
        if (beta_prior_mean.size() > 0)
            m.head(beta_prior_mean.size()) = beta_prior_mean;
        return m;
    }

    /** Family parameter on its natural (Beta phi) or log (Gaussian) scale. */
    double family_param(const AsmBlock& b, const Eigen::VectorXd& theta) const {
        if (b.family_hyper < 0) return b.fixed_family_value;
        if (b.family == Family::Beta) return natural(theta, b.family_hyper);
        // Gaussian: kernel consumes log tau = transformed value directly
        return theta[b.family_hyper];
    }
};

/** Wire a ModelSpec into one joint latent system. */
inline LatentSystem assemble(const ModelSpec& spec) {
    require(!spec.blocks.empty(), "SpecError", "model has no observation blocks");
    LatentSystem sys;
    sys.fixed_prior_precision = spec.fixed_prior_precision;
    sys.beta_prior_mean = spec.beta_prior_mean;
    sys.beta_prior_precision = spec.beta_prior_precision;
    sys.terms = spec.terms;

    // Global coefficient registry in first-appearance order.
    std::map<std::string, int> coef_index;
    for (const auto& b : spec.blocks)
        for (const auto& nm : b.fixed.coef_names)
            if (!coef_index.count(nm)) {
                coef_index[nm] = static_cast<int>(sys.coef_names.size());
                sys.coef_names.push_back(nm);
            }
    const int n_beta = static_cast<int>(sys.coef_names.size());
    require(spec.beta_prior_mean.size() == 0 ||
                spec.beta_prior_mean.size() == n_beta,
            "SpecError", "beta prior mean length != coefficient count");
    require(spec.beta_prior_precision.size() == 0 ||
                (spec.beta_prior_precision.rows() == n_beta &&
                 spec.beta_prior_precision.cols() == n_beta),
            "SpecError", "beta prior precision shape != coefficient count");

    sys.layout.slices.push_back({"beta", 0, n_beta});
    int offset = n_beta;
    std::map<std::string, int> term_index;
    for (size_t t = 0; t < spec.terms.size(); ++t) {
        const auto& term = spec.terms[t];
        term.validate();
        require(!term_index.count(term.name), "SpecError",
                "duplicate term name '" + term.name + "'");
        term_index[term.name] = static_cast<int>(t);
        sys.layout.slices.push_back({term.name, offset, term.size});
        offset += term.size;
    }
    sys.layout.dim = offset;

    // Hyper registry: term hypers first, then block-local hypers. A replica
    // reuses its source term's slots instead of adding new ones.
    for (const auto& term : spec.terms) {
        if (!term.share_hypers_with.empty()) {
            require(term_index.count(term.share_hypers_with) &&
                        term_index[term.share_hypers_with] <
                            term_index[term.name],
                    "SpecError",
                    "term " + term.name + ": share_hypers_with must name an "
                    "earlier term");
            sys.term_hyper_index.push_back(
                sys.term_hyper_index[term_index[term.share_hypers_with]]);
            continue;
        }
        std::vector<int> idx;
        for (const auto& h : term.hypers) {
            HyperDecl g = h;
            g.name = term.name + "." + h.name;
            idx.push_back(static_cast<int>(sys.hypers.size()));
            sys.hypers.push_back(g);
        }
        sys.term_hyper_index.push_back(idx);
    }

    int row_offset = 0;
    for (const auto& b : spec.blocks) {
        LatentSystem::AsmBlock ab;
        ab.name = b.name;
        ab.family = b.family;
        ab.y = b.y;
        ab.ycomp = b.ycomp;
        ab.n_obs = b.n_obs();
        ab.rows_per_obs = b.rows_per_obs();
        ab.row_offset = row_offset;
        // nrows may be zero: a partitioned fit keeps empty blocks so the
        // coefficient and hyperparameter registries align across partitions.
        const int nrows = b.n_pred_rows();

        if (b.family == Family::Dirichlet)
            for (int i = 0; i < ab.ycomp.rows(); ++i)
                require(std::abs(ab.ycomp.row(i).sum() - 1.0) <= kClosureTol,
                        "SpecError",
                        "block " + b.name + ": composition row " +
                            std::to_string(i) + " does not close");

        std::vector<int> local_to_global;
        for (const auto& h : b.hypers) {
            HyperDecl g = h;
            g.name = b.name + "." + h.name;
            g.validate();
            local_to_global.push_back(static_cast<int>(sys.hypers.size()));
            sys.hypers.push_back(g);
        }
        if (b.family_hyper >= 0) {
            require(b.family_hyper < static_cast<int>(b.hypers.size()), "SpecError",
                    "block " + b.name + ": family_hyper out of range");
            ab.family_hyper = local_to_global[b.family_hyper];
        }
        ab.fixed_family_value = b.fixed_family_value;

        if (b.fixed.coef_names.size() > 0) {
            require(b.fixed.X.rows() == nrows, "SpecError",
                    "block " + b.name + ": design rows != predictor rows");
            require(b.fixed.X.cols() ==
                        static_cast<long>(b.fixed.coef_names.size()),
                    "SpecError", "block " + b.name + ": design column mismatch");
            for (int r = 0; r < b.fixed.X.rows(); ++r)
                for (int c = 0; c < b.fixed.X.cols(); ++c)
                    if (b.fixed.X(r, c) != 0.0)
                        ab.fixed_trip.emplace_back(
                            row_offset + r, coef_index[b.fixed.coef_names[c]],
                            b.fixed.X(r, c));
        }

        for (const auto& bind : b.bindings) {
            require(term_index.count(bind.term), "SpecError",
                    "block " + b.name + ": binding names unknown term '" +
                        bind.term + "'");
            const Slice& s = sys.layout.slices[term_index[bind.term] + 1];
            require(bind.map.rows() == nrows && bind.map.cols() == s.size,
                    "SpecError",
                    "block " + b.name + ": binding map shape mismatch for '" +
                        bind.term + "'");
            LatentSystem::AsmBinding asm_bind;
            if (bind.scale_hyper >= 0) {
                require(bind.scale_hyper < static_cast<int>(b.hypers.size()),
                        "SpecError",
                        "block " + b.name + ": binding scale hyper out of range");
                asm_bind.scale_hyper = local_to_global[bind.scale_hyper];
            }
            for (int k = 0; k < bind.map.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator it(bind.map, k);
                     it; ++it)
                    asm_bind.trip.emplace_back(
                        row_offset + static_cast<int>(it.row()),
                        s.offset + static_cast<int>(it.col()), it.value());
            ab.bindings.push_back(std::move(asm_bind));
        }

        if (b.offset.size() > 0) {
            require(b.offset.size() == nrows, "SpecError",
                    "block " + b.name + ": offset length mismatch");
            ab.offset = b.offset;
        }

        row_offset += nrows;
        sys.blocks.push_back(std::move(ab));
    }
    sys.total_pred_rows = row_offset;

    // Stack term constraints into global rows.
    int n_con = 0;
    for (const auto& term : spec.terms) n_con += static_cast<int>(term.constraints.size());
    if (n_con > 0) {
        sys.constraints = Eigen::MatrixXd::Zero(n_con, sys.layout.dim);
        int r = 0;
        for (size_t t = 0; t < spec.terms.size(); ++t) {
            const Slice& s = sys.layout.slices[t + 1];
            for (const auto& c : spec.terms[t].constraints)
                sys.constraints.row(r++).segment(s.offset, s.size) = c.transpose();
        }
    }
    return sys;
}

} // namespace costa

#endif
