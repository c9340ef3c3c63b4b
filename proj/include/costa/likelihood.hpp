#ifndef COSTA_LIKELIHOOD_HPP
#define COSTA_LIKELIHOOD_HPP

#include <Eigen/Dense>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "coda.hpp"
#include "common.hpp"

/**
 * @file likelihood.hpp
 * @brief Observation-model kernels (Beta, Dirichlet, Bernoulli, fixed-precision
 *        Gaussian stack) and the hurdle routing that splits compositional rows
 *        into incidence data and re-closed logratio pseudo-observations.
 *
 * Boundary values are hard errors for the Beta kernel: zeros and ones carry
 * model information and must travel through the hurdle path instead.
 */

namespace costa {

enum class Family { Beta, Dirichlet, Bernoulli, GaussianFixedPrecision };

inline const char* family_name(Family f) {
    switch (f) {
        case Family::Beta: return "beta";
        case Family::Dirichlet: return "dirichlet";
        case Family::Bernoulli: return "bernoulli";
        case Family::GaussianFixedPrecision: return "gaussian_fixed";
    }
    return "unknown";
}

/** Default fixed log-precision of logratio pseudo-observations. */
inline constexpr double kDefaultLogTauStar = 12.0;

/** Beta log density with mean/precision shapes a = mu phi, b = (1-mu) phi. */
inline double beta_loglik(double y, double mu, double phi) {
    require(y > 0.0 && y < 1.0, "BoundaryValue",
            "Beta data must lie strictly inside (0,1); route zeros through the hurdle");
    require(mu > 0.0 && mu < 1.0, "ParameterOutOfRange", "mean outside (0,1)");
    require(phi > 0.0, "ParameterOutOfRange", "precision must be positive");
    const double a = mu * phi;
    const double b = (1.0 - mu) * phi;
    return std::lgamma(phi) - std::lgamma(a) - std::lgamma(b) +
           (a - 1.0) * std::log(y) + (b - 1.0) * std::log1p(-y);
}

/** Bernoulli log likelihood on the logit scale, stable for large |eta|. */
inline double bernoulli_loglik(int z, double eta) {
    require(z == 0 || z == 1, "ParameterOutOfRange", "z must be 0 or 1");
    return z == 1 ? -log1pexp(-eta) : -log1pexp(eta);
}

/** Gaussian log density with fixed precision exp(log_tau). */
inline double gaussian_fixed_loglik(double y, double eta, double log_tau) {
    const double tau = std::exp(log_tau);
    return 0.5 * (log_tau - std::log(2.0 * M_PI)) - 0.5 * tau * sqr(y - eta);
}

/** Log link for Dirichlet shapes, with the mean parameterization alongside. */
struct DirichletMap {
    DirichletParams params;
    Composition mean;
};

inline DirichletMap dirichlet_predictor_map(const Eigen::VectorXd& etas) {
    require(etas.size() >= 2, "DimensionTooSmall", "need D >= 2 predictors");
    DirichletMap out;
    for (int i = 0; i < etas.size(); ++i) {
        require(std::isfinite(etas[i]), "NonFiniteInput", "predictor is not finite");
        require(std::abs(etas[i]) <= 30.0, "Overflow",
                "Dirichlet predictor magnitude exceeds 30");
        out.params.alpha.push_back(std::exp(etas[i]));
    }
    out.mean = dirichlet_mean(out.params);
    return out;
}

// ---------------------------------------------------------------------------
// Fixed-precision Gaussian stack for CLR observations
// ---------------------------------------------------------------------------

/**
 * n x D logratio values flattened to n*D univariate pseudo-observations with
 * one shared fixed precision. Index layout: obs = row * D + part.
 */
struct GaussianStack {
    Eigen::VectorXd y;      // stacked logratio values
    Eigen::VectorXd eta;    // stacked linear predictors
    int n = 0;
    int D = 0;
    double log_tau_star = kDefaultLogTauStar;

    double loglik() const {
        double s = 0.0;
        for (int k = 0; k < y.size(); ++k)
            s += gaussian_fixed_loglik(y[k], eta[k], log_tau_star);
        return s;
    }
};

inline GaussianStack clr_gaussian_stack(const LogratioMatrix& Ystar,
                                        const Eigen::MatrixXd& predictors,
                                        double log_tau_star = kDefaultLogTauStar) {
    require(Ystar.kind == LogratioKind::CLR, "DimensionMismatch",
            "Gaussian stack expects CLR logratios");
    require(log_tau_star > 1.0, "ParameterOutOfRange",
            "log tau* must be much larger than 1");
    require(predictors.rows() == Ystar.values.rows() &&
                predictors.cols() == Ystar.values.cols(),
            "DimensionMismatch", "predictor matrix must match the logratio matrix");
    GaussianStack out;
    out.n = static_cast<int>(Ystar.values.rows());
    out.D = static_cast<int>(Ystar.values.cols());
    out.log_tau_star = log_tau_star;
    out.y.resize(out.n * out.D);
    out.eta.resize(out.n * out.D);
    for (int i = 0; i < out.n; ++i)
        for (int d = 0; d < out.D; ++d) {
            out.y[i * out.D + d] = Ystar.values(i, d);
            out.eta[i * out.D + d] = predictors(i, d);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Linear-predictor derivatives (raw, unfloored; solvers clamp curvature)
// ---------------------------------------------------------------------------

struct Deriv1 {
    double loglik;
    double d1;   // d loglik / d eta
    double d2;   // d^2 loglik / d eta^2
};

/** Beta with logit mean link: mu = logistic(eta), shapes (mu phi, (1-mu) phi). */
inline Deriv1 beta_eta_derivs(double y, double eta, double phi) {
    const double mu = logistic(eta);
    const double ll = beta_loglik(y, mu, phi);
    const double dmu = mu * (1.0 - mu);
    const double dl_dmu = phi * (std::log(y) - std::log1p(-y) -
                                 boost::math::digamma(mu * phi) +
                                 boost::math::digamma((1.0 - mu) * phi));
    const double d2l_dmu2 = -phi * phi * (boost::math::trigamma(mu * phi) +
                                          boost::math::trigamma((1.0 - mu) * phi));
    return {ll, dl_dmu * dmu, d2l_dmu2 * dmu * dmu + dl_dmu * dmu * (1.0 - 2.0 * mu)};
}

inline Deriv1 bernoulli_eta_derivs(int z, double eta) {
    const double p = logistic(eta);
    return {bernoulli_loglik(z, eta), z - p, -p * (1.0 - p)};
}

inline Deriv1 gaussian_eta_derivs(double y, double eta, double log_tau) {
    const double tau = std::exp(log_tau);
    return {gaussian_fixed_loglik(y, eta, log_tau), tau * (y - eta), -tau};
}

/** Dirichlet with log link per shape: loglik, gradient, observed Hessian. */
struct DerivBlock {
    double loglik;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
};

inline DerivBlock dirichlet_eta_derivs(const Composition& y,
                                       const Eigen::VectorXd& etas) {
    DirichletMap map = dirichlet_predictor_map(etas);
    const int D = static_cast<int>(etas.size());
    const double a0 = map.params.alpha0();
    const double psi_a0 = boost::math::digamma(a0);
    const double psi1_a0 = boost::math::trigamma(a0);
    DerivBlock out;
    out.loglik = dirichlet_logpdf(y, map.params);
    out.grad.resize(D);
    out.hess.resize(D, D);
    std::vector<double> h(D);
    for (int d = 0; d < D; ++d) {
        const double a = map.params.alpha[d];
        h[d] = std::log(y.parts[d]) - boost::math::digamma(a) + psi_a0;
        out.grad[d] = a * h[d];
    }
    for (int d = 0; d < D; ++d) {
        const double ad = map.params.alpha[d];
        for (int e = 0; e < D; ++e) {
            const double ae = map.params.alpha[e];
            double v = ad * ae * psi1_a0;
            if (d == e) v += ad * h[d] - ad * ad * boost::math::trigamma(ad);
            out.hess(d, e) = v;
        }
    }
    return out;
}

/** Fisher (expected) information of the Dirichlet block; always PSD. */
inline Eigen::MatrixXd dirichlet_fisher(const Eigen::VectorXd& etas) {
    DirichletMap map = dirichlet_predictor_map(etas);
    const int D = static_cast<int>(etas.size());
    const double psi1_a0 = boost::math::trigamma(map.params.alpha0());
    Eigen::MatrixXd F(D, D);
    for (int d = 0; d < D; ++d)
        for (int e = 0; e < D; ++e) {
            const double ad = map.params.alpha[d];
            const double ae = map.params.alpha[e];
            F(d, e) = -ad * ae * psi1_a0;
            if (d == e) F(d, e) += ad * ad * boost::math::trigamma(ad);
        }
    return F;
}

// ---------------------------------------------------------------------------
// Family samplers (deterministic under a fixed RngStream)
// ---------------------------------------------------------------------------

inline int draw_bernoulli(RngStream& rng, double eta) {
    return rng.uniform() < logistic(eta) ? 1 : 0;
}

inline double draw_beta(RngStream& rng, double mu, double phi) {
    require(mu > 0.0 && mu < 1.0 && phi > 0.0, "ParameterOutOfRange",
            "Beta draw needs mu in (0,1), phi > 0");
    return rng.beta(mu * phi, (1.0 - mu) * phi);
}

inline Composition draw_dirichlet(RngStream& rng, const DirichletParams& p) {
    p.validate();
    std::vector<double> g(p.dim());
    for (int i = 0; i < p.dim(); ++i) g[i] = rng.gamma(p.alpha[i]);
    return close(std::move(g));
}

// ---------------------------------------------------------------------------
// Hurdle routing
// ---------------------------------------------------------------------------

struct HurdleModelSpec {
    std::vector<char> zero_capable;       // per part
    Family value_family = Family::GaussianFixedPrecision;
    bool share_value_predictor = true;    // incidence predictor = beta_B + alpha * value predictor
    double log_tau_star = kDefaultLogTauStar;

    int dim() const { return static_cast<int>(zero_capable.size()); }
};

struct IncidenceObs {
    int row;
    int part;
    int z;
};

/** Value-model data of one row: CLR over the re-closed nonzero parts. */
struct ValueObs {
    int row;
    std::vector<int> parts;        // nonzero part indices, ascending
    Eigen::VectorXd clr_values;    // same length as parts, sums to zero
};

struct HurdleRouted {
    std::vector<IncidenceObs> incidence;
    std::vector<ValueObs> values;
};

/**
 * Split compositional rows: every zero-capable part yields a Bernoulli
 * incidence observation per row; rows with at least two nonzero parts yield
 * CLR pseudo-observations on the re-closed subcomposition; unit-part rows
 * contribute incidence data only.
 */
inline HurdleRouted hurdle_route(const CompositionMatrix& Y,
                                 const HurdleModelSpec& spec) {
    Y.validate();
    require(spec.dim() == Y.dim(), "DimensionMismatch",
            "hurdle spec dimension differs from data");
    HurdleRouted out;
    for (int i = 0; i < Y.n(); ++i) {
        const Composition& row = Y.rows[i];
        std::vector<int> nonzero;
        for (int d = 0; d < Y.dim(); ++d) {
            const bool is_zero = row.parts[d] == 0.0;
            if (is_zero)
                require(spec.zero_capable[d], "UnexpectedZero",
                        "part " + std::to_string(d) + " of row " + std::to_string(i) +
                            " is zero but not flagged zero-capable");
            if (spec.zero_capable[d])
                out.incidence.push_back({i, d, is_zero ? 0 : 1});
            if (!is_zero) nonzero.push_back(d);
        }
        if (nonzero.size() >= 2) {
            Composition sub = reclose_subcomposition(row, nonzero);
            ValueObs v;
            v.row = i;
            v.parts = nonzero;
            v.clr_values = clr(sub);
            out.values.push_back(std::move(v));
        }
    }
    return out;
}

} // namespace costa

#endif
