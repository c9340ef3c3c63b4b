#ifndef COSTA_INFERENCE_HPP
#define COSTA_INFERENCE_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "common.hpp"
#include "linalg.hpp"
#include "likelihood.hpp"
#include "model.hpp"

/**
 * @file inference.hpp
 * @brief Gaussian approximation at the posterior mode of a LatentSystem,
 *        hyperparameter exploration (coordinate ascent plus a centered grid),
 *        mixture marginals, WAIC, forward/backward covariate search, and
 *        model-based simulation.
 *
 * Dirichlet blocks lay predictor rows out observation-major: part d of
 * observation i sits at block row i * D + d.
 */

namespace costa {

// ---------------------------------------------------------------------------
// Likelihood evaluation over the stacked predictor
// ---------------------------------------------------------------------------

struct LikDerivatives {
    double loglik = 0.0;
    Eigen::VectorXd grad;                           // exact d loglik / d eta
    std::vector<Eigen::Triplet<double>> curv;       // PSD-floored negative Hessian
    std::vector<Eigen::Triplet<double>> curv_raw;   // exact negative Hessian
};

namespace detail {

/** Clamp eigenvalues of a symmetric matrix to at least `floor`. */
inline Eigen::MatrixXd floor_spd(const Eigen::MatrixXd& S, double floor) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline Composition comp_row(const Eigen::MatrixXd& Y, int i) {
    Composition c;
    c.parts.reserve(Y.cols());
    for (int d = 0; d < Y.cols(); ++d) c.parts.push_back(Y(i, d));
    return c;
}

} // namespace detail

/** Total log likelihood of all blocks at the stacked predictor eta. */
inline double system_loglik(const LatentSystem& sys, const Eigen::VectorXd& theta,
                            const Eigen::VectorXd& eta) {
    double ll = 0.0;
    for (const auto& b : sys.blocks) {
        const double fam = sys.family_param(b, theta);
        if (b.family == Family::Dirichlet) {
            const int D = b.rows_per_obs;
            for (int i = 0; i < b.n_obs; ++i) {
                DirichletMap map = dirichlet_predictor_map(
                    eta.segment(b.row_offset + i * D, D));
                ll += dirichlet_logpdf(detail::comp_row(b.ycomp, i), map.params);
            }
        } else {
            for (int i = 0; i < b.n_obs; ++i) {
                const double e = eta[b.row_offset + i];
                switch (b.family) {
                    case Family::Beta:
                        ll += beta_loglik(b.y[i], logistic(e), fam);
                        break;
                    case Family::Bernoulli:
                        ll += bernoulli_loglik(static_cast<int>(b.y[i]), e);
                        break;
                    case Family::GaussianFixedPrecision:
                        ll += gaussian_fixed_loglik(b.y[i], e, fam);
                        break;
                    default:
                        fail("SpecError", "unhandled family in block " + b.name);
                }
            }
        }
    }
    return ll;
}

/** Exact gradient of the log likelihood with respect to eta. */
inline Eigen::VectorXd system_grad(const LatentSystem& sys,
                                   const Eigen::VectorXd& theta,
                                   const Eigen::VectorXd& eta) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(sys.total_pred_rows);
    for (const auto& b : sys.blocks) {
        const double fam = sys.family_param(b, theta);
        if (b.family == Family::Dirichlet) {
            const int D = b.rows_per_obs;
            for (int i = 0; i < b.n_obs; ++i) {
                const int r0 = b.row_offset + i * D;
                DerivBlock db = dirichlet_eta_derivs(detail::comp_row(b.ycomp, i),
                                                     eta.segment(r0, D));
                g.segment(r0, D) = db.grad;
            }
        } else {
            for (int i = 0; i < b.n_obs; ++i) {
                const int r = b.row_offset + i;
                Deriv1 d;
                switch (b.family) {
                    case Family::Beta:
                        d = beta_eta_derivs(b.y[i], eta[r], fam);
                        break;
                    case Family::Bernoulli:
                        d = bernoulli_eta_derivs(static_cast<int>(b.y[i]), eta[r]);
                        break;
                    case Family::GaussianFixedPrecision:
                        d = gaussian_eta_derivs(b.y[i], eta[r], fam);
                        break;
                    default:
                        fail("SpecError", "unhandled family in block " + b.name);
                }
                g[r] = d.d1;
            }
        }
    }
    return g;
}

/**
 * Log likelihood, exact gradient, and the curvature used by the Newton solver.
 * Curvature entries are the negative Hessian floored to be positive
 * semidefinite (scalar floor 1e-12; Dirichlet blocks eigenvalue-floored).
 */
inline LikDerivatives system_derivs(const LatentSystem& sys,
                                    const Eigen::VectorXd& theta,
                                    const Eigen::VectorXd& eta) {
    constexpr double kCurvFloor = 1e-12;
    LikDerivatives out;
    out.grad = Eigen::VectorXd::Zero(sys.total_pred_rows);
    for (const auto& b : sys.blocks) {
        const double fam = sys.family_param(b, theta);
        if (b.family == Family::Dirichlet) {
            const int D = b.rows_per_obs;
            for (int i = 0; i < b.n_obs; ++i) {
                const int r0 = b.row_offset + i * D;
                DerivBlock db = dirichlet_eta_derivs(detail::comp_row(b.ycomp, i),
                                                     eta.segment(r0, D));
                out.loglik += db.loglik;
                out.grad.segment(r0, D) = db.grad;
                Eigen::MatrixXd W = detail::floor_spd(-db.hess, kCurvFloor);
                for (int a = 0; a < D; ++a)
                    for (int c = 0; c < D; ++c) {
                        out.curv.emplace_back(r0 + a, r0 + c, W(a, c));
                        out.curv_raw.emplace_back(r0 + a, r0 + c, -db.hess(a, c));
                    }
            }
        } else {
            for (int i = 0; i < b.n_obs; ++i) {
                const int r = b.row_offset + i;
                Deriv1 d;
                switch (b.family) {
                    case Family::Beta:
                        d = beta_eta_derivs(b.y[i], eta[r], fam);
                        break;
                    case Family::Bernoulli:
                        d = bernoulli_eta_derivs(static_cast<int>(b.y[i]), eta[r]);
                        break;
                    case Family::GaussianFixedPrecision:
                        d = gaussian_eta_derivs(b.y[i], eta[r], fam);
                        break;
                    default:
                        fail("SpecError", "unhandled family in block " + b.name);
                }
                out.loglik += d.loglik;
                out.grad[r] = d.d1;
                out.curv.emplace_back(r, r, std::max(-d.d2, kCurvFloor));
                out.curv_raw.emplace_back(r, r, -d.d2);
            }
        }
    }
    return out;
}

/** Per-observation log likelihood; a Dirichlet composition row is one unit. */
inline Eigen::VectorXd per_observation_loglik(const LatentSystem& sys,
                                              const Eigen::VectorXd& theta,
                                              const Eigen::VectorXd& eta) {
    int total = 0;
    for (const auto& b : sys.blocks) total += b.n_obs;
    Eigen::VectorXd out(total);
    int k = 0;
    for (const auto& b : sys.blocks) {
        const double fam = sys.family_param(b, theta);
        for (int i = 0; i < b.n_obs; ++i) {
            if (b.family == Family::Dirichlet) {
                const int D = b.rows_per_obs;
                DirichletMap map = dirichlet_predictor_map(
                    eta.segment(b.row_offset + i * D, D));
                out[k++] = dirichlet_logpdf(detail::comp_row(b.ycomp, i),
                                            map.params);
            } else {
                const double e = eta[b.row_offset + i];
                switch (b.family) {
                    case Family::Beta:
                        out[k++] = beta_loglik(b.y[i], logistic(e), fam);
                        break;
                    case Family::Bernoulli:
                        out[k++] = bernoulli_loglik(static_cast<int>(b.y[i]), e);
                        break;
                    case Family::GaussianFixedPrecision:
                        out[k++] = gaussian_fixed_loglik(b.y[i], e, fam);
                        break;
                    default:
                        fail("SpecError", "unhandled family in block " + b.name);
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian approximation at the mode
// ---------------------------------------------------------------------------

struct FitOptions {
    int max_iterations = 100;
    double grad_tol = 1e-8;     // infinity norm of the projected gradient
    double armijo = 1e-4;
    double min_step = 1e-10;
};

struct FitResult {
    Eigen::VectorXd theta;
    Eigen::VectorXd mode;
    Eigen::SparseMatrix<double> H;         // posterior precision at the mode
    std::shared_ptr<SparseLLT> factor;     // factorization of H
    double loglik = 0.0;
    double log_evidence = 0.0;             // Laplace approximation
    int iterations = 0;
    double grad_norm = 0.0;
};

/**
 * Newton maximization of log prior + log likelihood over the latent vector,
 * with backtracking line search and the conditioning-by-kriging constraint
 * correction applied after every accepted step.
 */
inline FitResult fit_gaussian_approx(const LatentSystem& sys,
                                     const Eigen::VectorXd& theta,
                                     const FitOptions& opts = {}) {
    require(theta.size() == sys.n_hypers(), "DimensionMismatch",
            "theta length does not match hyperparameter registry");
    const int n = sys.latent_dim();
    const Eigen::SparseMatrix<double> A = sys.build_A(theta);
    const Eigen::VectorXd off = sys.stacked_offset();
    const Eigen::SparseMatrix<double> Qp = sys.build_Q_prior(theta);
    SparseLLT prior_llt;
    prior_llt.compute(Qp);
    require(prior_llt.info() == Eigen::Success, "FactorizationFailure",
            "joint prior precision is not positive definite");
    const double logdet_Qp = logdet_from_llt(prior_llt);
    const bool constrained = sys.constraints.rows() > 0;
    const Eigen::VectorXd pm = sys.prior_mean();

    FitResult res;
    res.theta = theta;
    Eigen::VectorXd x = pm;

    // Infeasible trial points (e.g. a predictor overflowing a link's domain)
    // score -inf so the line search backtracks past them.
    auto prior_quad = [&](const Eigen::VectorXd& v) -> double {
        const Eigen::VectorXd c = v - pm;
        return 0.5 * c.dot(Qp * c);
    };
    auto objective = [&](const Eigen::VectorXd& v) -> double {
        try {
            return system_loglik(sys, theta, A * v + off) - prior_quad(v);
        } catch (const Error&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    // Exact observed curvature while it is positive definite (quadratic
    // convergence near the mode); PSD-floored curvature otherwise.
    auto curvature_factor = [&](const LikDerivatives& d,
                                Eigen::SparseMatrix<double>& H_out) {
        Eigen::SparseMatrix<double> W(sys.total_pred_rows, sys.total_pred_rows);
        W.setFromTriplets(d.curv_raw.begin(), d.curv_raw.end());
        H_out = Qp;
        H_out += Eigen::SparseMatrix<double>(A.transpose() * W * A);
        auto factor = std::make_shared<SparseLLT>();
        factor->compute(H_out);
        if (factor->info() == Eigen::Success) return factor;
        W.setFromTriplets(d.curv.begin(), d.curv.end());
        H_out = Qp;
        H_out += Eigen::SparseMatrix<double>(A.transpose() * W * A);
        factor = std::make_shared<SparseLLT>();
        factor->compute(H_out);
        require(factor->info() == Eigen::Success, "FactorizationFailure",
                "posterior precision factorization failed");
        return factor;
    };

    bool converged = false;
    for (int iter = 1; iter <= opts.max_iterations; ++iter) {
        const Eigen::VectorXd eta = A * x + off;
        LikDerivatives d = system_derivs(sys, theta, eta);
        const Eigen::VectorXd grad = A.transpose() * d.grad - Qp * (x - pm);

        Eigen::SparseMatrix<double> H;
        auto factor = curvature_factor(d, H);

        const Eigen::VectorXd step = factor->solve(grad);
        const double f0 = d.loglik - prior_quad(x);
        const double slope = grad.dot(step);
        Eigen::VectorXd cand;
        if (slope <= 1e-11 * (1.0 + std::abs(f0))) {
            // Predicted gain is below numeric resolution of the objective;
            // the full step cannot be certified but is safe to take.
            cand = x + step;
        } else {
            double t = 1.0;
            for (;;) {
                require(t >= opts.min_step, "LineSearchFailure",
                        "backtracking step fell below " +
                            detail::format_double(opts.min_step));
                cand = x + t * step;
                const double fc = objective(cand);
                if (std::isfinite(fc) && fc >= f0 + opts.armijo * t * slope)
                    break;
                t *= 0.5;
            }
        }
        if (constrained) {
            KrigingCorrector kc(*factor, sys.constraints);
            cand = kc.correct_mean(cand);
        }
        x = cand;

        Eigen::VectorXd g2 =
            A.transpose() * system_grad(sys, theta, A * x + off) - Qp * (x - pm);
        if (constrained) g2 = project_to_nullspace(sys.constraints, g2);
        res.grad_norm = g2.lpNorm<Eigen::Infinity>();
        res.iterations = iter;
        if (res.grad_norm < opts.grad_tol) {
            converged = true;
            break;
        }
    }
    require(converged, "NonConvergence",
            "Newton did not reach gradient tolerance in " +
                std::to_string(opts.max_iterations) + " iterations");

    // Final curvature, factor, and the evidence at the converged mode.
    LikDerivatives d = system_derivs(sys, theta, A * x + off);
    res.factor = curvature_factor(d, res.H);
    res.mode = x;
    res.loglik = d.loglik;
    res.log_evidence = d.loglik - prior_quad(x) + 0.5 * logdet_Qp -
                       0.5 * logdet_from_llt(*res.factor);
    return res;
}

// ---------------------------------------------------------------------------
// Hyperparameter exploration
// ---------------------------------------------------------------------------

enum class ExploreStrategy { Grid, AscentGrid };

struct OptimizeOptions {
    ExploreStrategy strategy = ExploreStrategy::AscentGrid;
    double ascent_step = 0.3;
    int ascent_max_passes = 40;
    double ascent_min_step = 0.05;
    double grid_step = 0.3;
    int max_grid_dims = 5;      // grid dims capped so the set stays <= 3^5
    int threads = 1;
    FitOptions fit;
    std::function<double(const Eigen::VectorXd&)> log_hyperprior;  // uniform if unset
    bool latent_marginals = true;
    // Overrides grid construction entirely; duplicates allowed (they split weight).
    std::vector<Eigen::VectorXd> explicit_points;
};

struct HyperPoint {
    Eigen::VectorXd theta;
    double log_posterior = 0.0;   // log evidence + log hyperprior
    double weight = 0.0;
};

struct FixedEffectSummary {
    std::string name;
    double mean = 0.0, sd = 0.0, q025 = 0.0, q500 = 0.0, q975 = 0.0;
};

struct PosteriorSummary {
    Layout layout;
    std::vector<std::string> coef_names;
    std::vector<HyperPoint> points;   // successful evaluation points
    std::vector<FitResult> fits;      // parallel to points
    int best = 0;                     // index of the highest-weight point
    Eigen::VectorXd latent_mean;      // weight-mixture over points
    Eigen::VectorXd latent_sd;
    std::vector<FixedEffectSummary> fixed_effects;
    int newton_iterations = 0;        // diagnostics of the best point
    double grad_norm = 0.0;

    const Eigen::VectorXd& theta_mode() const { return points[best].theta; }

    Eigen::VectorXd slice_mean(const std::string& name) const {
        const Slice& s = layout.at(name);
        return latent_mean.segment(s.offset, s.size);
    }
    Eigen::VectorXd slice_sd(const std::string& name) const {
        const Slice& s = layout.at(name);
        return latent_sd.segment(s.offset, s.size);
    }
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/** p-quantile of a finite mixture of normals, by bisection on the CDF. */
inline double mixture_normal_quantile(const std::vector<double>& w,
                                      const std::vector<double>& mu,
                                      const std::vector<double>& sd, double p) {
    double lo = mu[0], hi = mu[0];
    for (size_t i = 0; i < mu.size(); ++i) {
        lo = std::min(lo, mu[i] - 10.0 * sd[i] - 1e-12);
        hi = std::max(hi, mu[i] + 10.0 * sd[i] + 1e-12);
    }
    for (int it = 0; it < 200 && hi - lo > 1e-12 * (1.0 + std::abs(hi)); ++it) {
        const double mid = 0.5 * (lo + hi);
        double F = 0.0;
        for (size_t i = 0; i < mu.size(); ++i)
            F += w[i] * (sd[i] > 0.0 ? normal_cdf((mid - mu[i]) / sd[i])
                                     : (mid >= mu[i] ? 1.0 : 0.0));
        (F < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

namespace detail {

inline std::string theta_key(const Eigen::VectorXd& t) {
    std::string k;
    for (int i = 0; i < t.size(); ++i) {
        k += format_double(t[i]);
        k += ',';
    }
    return k;
}

struct EvalCache {
    std::map<std::string, std::optional<FitResult>> entries;

    const std::optional<FitResult>& evaluate(const LatentSystem& sys,
                                             const Eigen::VectorXd& theta,
                                             const FitOptions& fopts) {
        const std::string key = theta_key(theta);
        auto it = entries.find(key);
        if (it != entries.end()) return it->second;
        std::optional<FitResult> r;
        try {
            r = fit_gaussian_approx(sys, theta, fopts);
        } catch (const Error&) {
            r.reset();
        }
        return entries.emplace(key, std::move(r)).first->second;
    }
};

} // namespace detail

/**
 * Explore the hyperparameter posterior: optional coordinate ascent to a mode,
 * then a centered 3-point-per-dimension grid over the first free dimensions
 * (capped at 3^5 points). Point weights are softmax of log evidence plus log
 * hyperprior; latent marginals are the weight-mixture over points. Points
 * whose fit fails are dropped; only an empty exploration set is an error.
 */
inline PosteriorSummary optimize_hyperparameters(const LatentSystem& sys,
                                                 const OptimizeOptions& opts = {}) {
    detail::EvalCache cache;
    const std::vector<int> free = sys.free_hypers();
    Eigen::VectorXd theta = sys.theta_init();

    auto log_prior = [&](const Eigen::VectorXd& t) {
        return opts.log_hyperprior ? opts.log_hyperprior(t) : 0.0;
    };
    auto score_of = [&](const Eigen::VectorXd& t) -> std::optional<double> {
        const auto& r = cache.evaluate(sys, t, opts.fit);
        if (!r) return std::nullopt;
        return r->log_evidence + log_prior(t);
    };

    if (opts.explicit_points.empty() &&
        opts.strategy == ExploreStrategy::AscentGrid && !free.empty()) {
        auto center = score_of(theta);
        double step = opts.ascent_step;
        for (int pass = 0; pass < opts.ascent_max_passes && step >= opts.ascent_min_step;
             ++pass) {
            bool improved = false;
            for (int d : free) {
                for (double dir : {+1.0, -1.0}) {
                    Eigen::VectorXd cand = theta;
                    cand[d] = std::clamp(cand[d] + dir * step, sys.hypers[d].lo,
                                         sys.hypers[d].hi);
                    if (cand[d] == theta[d]) continue;
                    auto s = score_of(cand);
                    if (s && (!center || *s > *center)) {
                        theta = cand;
                        center = s;
                        improved = true;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
    }

    // Centered grid over the first free dimensions. Bound clamping may
    // duplicate points; duplicates share the fit via the cache and split weight.
    std::vector<Eigen::VectorXd> grid;
    if (!opts.explicit_points.empty()) {
        for (const auto& g : opts.explicit_points) {
            require(g.size() == sys.n_hypers(), "DimensionMismatch",
                    "explicit point length does not match hyperparameters");
            grid.push_back(g);
        }
    } else {
        std::vector<int> grid_dims(
            free.begin(),
            free.begin() + std::min<size_t>(free.size(),
                                            static_cast<size_t>(opts.max_grid_dims)));
        grid.push_back(theta);
        for (int d : grid_dims) {
            std::vector<Eigen::VectorXd> next;
            for (const auto& g : grid)
                for (double offs : {-opts.grid_step, 0.0, +opts.grid_step}) {
                    Eigen::VectorXd cand = g;
                    cand[d] = std::clamp(cand[d] + offs, sys.hypers[d].lo,
                                         sys.hypers[d].hi);
                    next.push_back(cand);
                }
            std::swap(grid, next);
        }
    }

    // Evaluate uncached points, optionally in parallel; merge by grid index.
    std::vector<const Eigen::VectorXd*> pending;
    std::map<std::string, bool> pend_seen;
    for (const auto& g : grid) {
        const std::string k = detail::theta_key(g);
        if (!cache.entries.count(k) && pend_seen.emplace(k, true).second)
            pending.push_back(&g);
    }
    if (opts.threads > 1 && pending.size() > 1) {
        std::vector<std::optional<FitResult>> results(pending.size());
        std::vector<std::thread> pool;
        std::mutex next_mu;
        size_t next = 0;
        const int nthreads = std::min<int>(opts.threads,
                                           static_cast<int>(pending.size()));
        for (int t = 0; t < nthreads; ++t)
            pool.emplace_back([&]() {
                for (;;) {
                    size_t i;
                    {
                        std::lock_guard<std::mutex> lk(next_mu);
                        if (next >= pending.size()) return;
                        i = next++;
                    }
                    try {
                        results[i] = fit_gaussian_approx(sys, *pending[i], opts.fit);
                    } catch (const Error&) {
                        results[i].reset();
                    }
                }
            });
        for (auto& th : pool) th.join();
        for (size_t i = 0; i < pending.size(); ++i)
            cache.entries.emplace(detail::theta_key(*pending[i]),
                                  std::move(results[i]));
    }

    PosteriorSummary out;
    out.layout = sys.layout;
    out.coef_names = sys.coef_names;
    for (const auto& g : grid) {
        const auto& r = cache.evaluate(sys, g, opts.fit);
        if (!r) continue;
        HyperPoint hp;
        hp.theta = g;
        hp.log_posterior = r->log_evidence + log_prior(g);
        out.points.push_back(hp);
        out.fits.push_back(*r);
    }
    require(!out.points.empty(), "AllPointsFailed",
            "every hyperparameter point failed to fit");

    double lmax = out.points[0].log_posterior;
    for (const auto& p : out.points) lmax = std::max(lmax, p.log_posterior);
    double wsum = 0.0;
    for (auto& p : out.points) {
        p.weight = std::exp(p.log_posterior - lmax);
        wsum += p.weight;
    }
    for (auto& p : out.points) p.weight /= wsum;
    out.best = 0;
    for (size_t i = 1; i < out.points.size(); ++i)
        if (out.points[i].weight > out.points[out.best].weight)
            out.best = static_cast<int>(i);
    out.newton_iterations = out.fits[out.best].iterations;
    out.grad_norm = out.fits[out.best].grad_norm;

    if (opts.latent_marginals) {
        const int n = sys.latent_dim();
        const bool constrained = sys.constraints.rows() > 0;
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
        Eigen::VectorXd second = Eigen::VectorXd::Zero(n);
        std::vector<Eigen::VectorXd> pt_sd(out.points.size());
        for (size_t i = 0; i < out.points.size(); ++i) {
            const FitResult& f = out.fits[i];
            Eigen::VectorXd var = marginal_variances_from_llt(*f.factor);
            if (constrained) {
                KrigingCorrector kc(*f.factor, sys.constraints);
                var = kc.correct_variances(var);
            }
            var = var.cwiseMax(0.0);
            pt_sd[i] = var.cwiseSqrt();
            const double w = out.points[i].weight;
            mean += w * f.mode;
            second += w * (var + f.mode.cwiseProduct(f.mode));
        }
        out.latent_mean = mean;
        out.latent_sd =
            (second - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();

        const Slice& beta = out.layout.slices[0];
        std::vector<double> w(out.points.size());
        for (size_t i = 0; i < w.size(); ++i) w[i] = out.points[i].weight;
        for (int j = 0; j < beta.size; ++j) {
            std::vector<double> mu(out.points.size()), sd(out.points.size());
            for (size_t i = 0; i < out.points.size(); ++i) {
                mu[i] = out.fits[i].mode[beta.offset + j];
                sd[i] = pt_sd[i][beta.offset + j];
            }
            FixedEffectSummary fe;
            fe.name = out.coef_names[j];
            fe.mean = out.latent_mean[beta.offset + j];
            fe.sd = out.latent_sd[beta.offset + j];
            fe.q025 = mixture_normal_quantile(w, mu, sd, 0.025);
            fe.q500 = mixture_normal_quantile(w, mu, sd, 0.5);
            fe.q975 = mixture_normal_quantile(w, mu, sd, 0.975);
            out.fixed_effects.push_back(fe);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// WAIC
// ---------------------------------------------------------------------------

struct WaicResult {
    double waic = 0.0;
    double lppd = 0.0;
    double p_waic = 0.0;
    Eigen::VectorXd lppd_i;
    Eigen::VectorXd p_waic_i;
    Eigen::MatrixXd draws_loglik;   // draws x observation units
    int draws = 0;
};

/** One draw from N(mode, H^-1) given the factor of H. */
inline Eigen::VectorXd draw_from_factor(const SparseLLT& llt,
                                        const Eigen::VectorXd& mode,
                                        RngStream& rng) {
    Eigen::VectorXd z(mode.size());
    for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Eigen::VectorXd v = llt.matrixU().solve(z);
    return mode + llt.permutationPinv() * v;
}

/**
 * WAIC from posterior draws out of the Gaussian mixture across grid points:
 * -2 * sum_i (lppd_i - p_waic_i), with p_waic_i the per-observation draw
 * variance of the log predictive density.
 */
inline WaicResult waic(const LatentSystem& sys, const PosteriorSummary& post,
                       RngStream& rng, int ndraws = 200) {
    require(ndraws >= 50, "InsufficientDraws",
            "WAIC needs at least 50 draws, got " + std::to_string(ndraws));
    int n_units = 0;
    for (const auto& b : sys.blocks) n_units += b.n_obs;
    const bool constrained = sys.constraints.rows() > 0;
    const Eigen::VectorXd off = sys.stacked_offset();

    // Per-point builds are cached lazily; draws pick points by weight.
    std::vector<std::optional<Eigen::SparseMatrix<double>>> A_cache(
        post.points.size());
    std::vector<std::unique_ptr<KrigingCorrector>> kc_cache(post.points.size());

    Eigen::MatrixXd ll(ndraws, n_units);
    for (int m = 0; m < ndraws; ++m) {
        const double u = rng.uniform();
        size_t g = 0;
        double acc = 0.0;
        for (; g + 1 < post.points.size(); ++g) {
            acc += post.points[g].weight;
            if (u <= acc) break;
        }
        const FitResult& f = post.fits[g];
        if (!A_cache[g]) A_cache[g] = sys.build_A(f.theta);
        Eigen::VectorXd x = draw_from_factor(*f.factor, f.mode, rng);
        if (constrained) {
            if (!kc_cache[g])
                kc_cache[g] = std::make_unique<KrigingCorrector>(*f.factor,
                                                                 sys.constraints);
            x = kc_cache[g]->correct_mean(x);
        }
        ll.row(m) =
            per_observation_loglik(sys, f.theta, *A_cache[g] * x + off).transpose();
    }

    WaicResult out;
    out.draws = ndraws;
    out.lppd_i.resize(n_units);
    out.p_waic_i.resize(n_units);
    for (int i = 0; i < n_units; ++i) {
        std::vector<double> col(ll.col(i).data(), ll.col(i).data() + ndraws);
        out.lppd_i[i] = logsumexp(col) - std::log(static_cast<double>(ndraws));
        const double mean = ll.col(i).mean();
        out.p_waic_i[i] =
            (ll.col(i).array() - mean).square().sum() / (ndraws - 1);
    }
    out.lppd = out.lppd_i.sum();
    out.p_waic = out.p_waic_i.sum();
    out.waic = -2.0 * (out.lppd - out.p_waic);
    out.draws_loglik = std::move(ll);
    return out;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct SimulateOptions {
    // Slices fixed to given values instead of being drawn from their prior.
    std::map<std::string, Eigen::VectorXd> fixed_slices;
};

struct SimulatedData {
    Eigen::VectorXd latent;
    Eigen::VectorXd eta;
    std::vector<Eigen::VectorXd> block_y;       // per block; Dirichlet empty
    std::vector<Eigen::MatrixXd> block_ycomp;   // Dirichlet blocks only
};

/**
 * Draw latent slices from their priors at theta (kriging-corrected under the
 * term constraints), build predictors, and draw one response set per block.
 */
inline SimulatedData simulate(const LatentSystem& sys,
                              const Eigen::VectorXd& theta, RngStream& rng,
                              const SimulateOptions& opts = {}) {
    SimulatedData out;
    out.latent = Eigen::VectorXd::Zero(sys.latent_dim());

    const Slice& beta = sys.layout.slices[0];
    auto fixed_it = opts.fixed_slices.find("beta");
    if (fixed_it != opts.fixed_slices.end()) {
        require(fixed_it->second.size() == beta.size, "DimensionMismatch",
                "fixed beta slice has wrong length");
        out.latent.segment(beta.offset, beta.size) = fixed_it->second;
    } else {
        const double sd = 1.0 / std::sqrt(sys.fixed_prior_precision);
        for (int i = 0; i < beta.size; ++i)
            out.latent[beta.offset + i] = sd * rng.normal();
    }

    for (size_t t = 0; t < sys.terms.size(); ++t) {
        const Slice& s = sys.layout.slices[t + 1];
        auto it = opts.fixed_slices.find(sys.terms[t].name);
        if (it != opts.fixed_slices.end()) {
            require(it->second.size() == s.size, "DimensionMismatch",
                    "fixed slice '" + sys.terms[t].name + "' has wrong length");
            out.latent.segment(s.offset, s.size) = it->second;
            continue;
        }
        std::vector<double> nat;
        for (int gi : sys.term_hyper_index[t])
            nat.push_back(sys.natural(theta, gi));
        SparsePrecision Q = sys.terms[t].build(nat);
        Eigen::SparseMatrix<double> Qs = Q.Q;
        if (Q.rank_deficiency > 0) {
            double diag_mean = 0.0;
            for (int i = 0; i < Q.dim(); ++i) diag_mean += Qs.coeff(i, i);
            diag_mean /= Q.dim();
            Eigen::SparseMatrix<double> J(Q.dim(), Q.dim());
            J.setIdentity();
            Qs += Eigen::SparseMatrix<double>(1e-6 * diag_mean * J);
        }
        SparseLLT llt;
        llt.compute(Qs);
        require(llt.info() == Eigen::Success, "FactorizationFailure",
                "term '" + sys.terms[t].name + "' prior is not factorizable");
        Eigen::VectorXd z(s.size);
        for (int i = 0; i < s.size; ++i) z[i] = rng.normal();
        Eigen::VectorXd draw = llt.matrixU().solve(z);
        draw = llt.permutationPinv() * draw;
        if (!sys.terms[t].constraints.empty()) {
            Eigen::MatrixXd C(sys.terms[t].constraints.size(), s.size);
            for (size_t c = 0; c < sys.terms[t].constraints.size(); ++c)
                C.row(static_cast<long>(c)) = sys.terms[t].constraints[c].transpose();
            KrigingCorrector kc(llt, C);
            draw = kc.correct_mean(draw);
        }
        out.latent.segment(s.offset, s.size) = draw;
    }

    out.eta = sys.build_A(theta) * out.latent + sys.stacked_offset();
    out.block_y.resize(sys.blocks.size());
    out.block_ycomp.resize(sys.blocks.size());
    for (size_t bi = 0; bi < sys.blocks.size(); ++bi) {
        const auto& b = sys.blocks[bi];
        const double fam = sys.family_param(b, theta);
        if (b.family == Family::Dirichlet) {
            const int D = b.rows_per_obs;
            Eigen::MatrixXd Y(b.n_obs, D);
            for (int i = 0; i < b.n_obs; ++i) {
                DirichletMap map = dirichlet_predictor_map(
                    out.eta.segment(b.row_offset + i * D, D));
                Composition y = draw_dirichlet(rng, map.params);
                for (int d = 0; d < D; ++d) Y(i, d) = y.parts[d];
            }
            out.block_ycomp[bi] = Y;
        } else {
            Eigen::VectorXd y(b.n_obs);
            for (int i = 0; i < b.n_obs; ++i) {
                const double e = out.eta[b.row_offset + i];
                switch (b.family) {
                    case Family::Bernoulli:
                        y[i] = static_cast<double>(draw_bernoulli(rng, e));
                        break;
                    case Family::Beta:
                        y[i] = draw_beta(rng, logistic(e), fam);
                        break;
                    case Family::GaussianFixedPrecision:
                        y[i] = e + rng.normal() / std::sqrt(std::exp(fam));
                        break;
                    default:
                        fail("SpecError", "unhandled family in block " + b.name);
                }
            }
            out.block_y[bi] = y;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stepwise covariate search
// ---------------------------------------------------------------------------

struct StepwiseOptions {
    double prefilter = 0.75;   // |pearson| above this removes the later column
    int max_sweeps = 10;
};

struct StepwiseStep {
    std::string action;   // "add" or "drop"
    int candidate = -1;
    double score = 0.0;
    bool accepted = false;
};

struct StepwiseResult {
    std::vector<int> selected;
    std::vector<int> prefiltered;      // removed before the search
    std::vector<StepwiseStep> trace;
    double final_score = 0.0;
};

inline double pearson_correlation(const Eigen::VectorXd& a,
                                  const Eigen::VectorXd& b) {
    const double ma = a.mean(), mb = b.mean();
    const Eigen::ArrayXd da = a.array() - ma, db = b.array() - mb;
    const double denom = std::sqrt(da.square().sum() * db.square().sum());
    if (denom == 0.0) return 0.0;
    return (da * db).sum() / denom;
}

/**
 * Forward search to saturation, one backward pass, repeated to a fixpoint.
 * `score_of` maps a set of selected candidate indices to a criterion where
 * lower is better; ties break toward the earlier candidate.
 */
inline StepwiseResult stepwise_search(
    const Eigen::MatrixXd& candidates,
    const std::function<double(const std::vector<int>&)>& score_of,
    const StepwiseOptions& opts = {}) {
    const int p = static_cast<int>(candidates.cols());
    require(p >= 1, "SpecError", "stepwise search needs at least one candidate");

    StepwiseResult out;
    std::vector<bool> active(p, true);
    for (int i = 0; i < p; ++i) {
        if (!active[i]) continue;
        for (int j = i + 1; j < p; ++j)
            if (active[j] && std::abs(pearson_correlation(candidates.col(i),
                                                          candidates.col(j))) >
                                 opts.prefilter) {
                active[j] = false;
                out.prefiltered.push_back(j);
            }
    }

    std::map<std::vector<int>, double> cache;
    auto score = [&](const std::vector<int>& sel) {
        auto it = cache.find(sel);
        if (it != cache.end()) return it->second;
        const double s = score_of(sel);
        cache.emplace(sel, s);
        return s;
    };

    std::vector<int> selected;
    double best = score(selected);
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        bool sweep_changed = false;

        for (;;) {   // forward to saturation
            int pick = -1;
            double pick_score = best;
            for (int c = 0; c < p; ++c) {
                if (!active[c]) continue;
                if (std::find(selected.begin(), selected.end(), c) !=
                    selected.end())
                    continue;
                std::vector<int> trial = selected;
                trial.insert(std::upper_bound(trial.begin(), trial.end(), c), c);
                const double s = score(trial);
                out.trace.push_back({"add", c, s, false});
                if (s < pick_score) {
                    pick_score = s;
                    pick = c;
                }
            }
            if (pick < 0) break;
            selected.insert(
                std::upper_bound(selected.begin(), selected.end(), pick), pick);
            best = pick_score;
            out.trace.push_back({"add", pick, best, true});
            sweep_changed = true;
        }

        for (;;) {   // backward to saturation
            int pick = -1;
            double pick_score = best;
            for (int c : selected) {
                std::vector<int> trial;
                for (int s : selected)
                    if (s != c) trial.push_back(s);
                const double s = score(trial);
                out.trace.push_back({"drop", c, s, false});
                if (s < pick_score) {
                    pick_score = s;
                    pick = c;
                }
            }
            if (pick < 0) break;
            selected.erase(std::find(selected.begin(), selected.end(), pick));
            best = pick_score;
            out.trace.push_back({"drop", pick, best, true});
            sweep_changed = true;
        }

        if (!sweep_changed) break;
    }
    out.selected = selected;
    out.final_score = best;
    return out;
}

} // namespace costa

#endif
