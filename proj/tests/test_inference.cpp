#include <catch2/catch_amalgamated.hpp>

#include <costa/inference.hpp>
#include <costa/model.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace costa;
using Catch::Approx;

namespace {

std::string thrown_code(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

RandomTermSpec iid_term(const std::string& name, int n, double init_log_tau,
                        bool fixed) {
    RandomTermSpec t;
    t.name = name;
    t.size = n;
    t.hypers.push_back({"log_tau", Transform::Log, -6.0, 10.0, init_log_tau, fixed});
    t.build = [n](const std::vector<double>& nat) { return iid_precision(n, nat[0]); };
    return t;
}

RandomTermSpec rw1_term(const std::string& name, int n, double init_log_tau,
                        bool fixed) {
    RandomTermSpec t;
    t.name = name;
    t.size = n;
    t.hypers.push_back({"log_tau", Transform::Log, -6.0, 10.0, init_log_tau, fixed});
    t.build = [n](const std::vector<double>& nat) { return rw1_precision(n, nat[0]); };
    t.constraints.push_back(Eigen::VectorXd::Ones(n));
    return t;
}

Eigen::SparseMatrix<double> selector(int nrows, const std::vector<int>& idx,
                                     int ncols) {
    std::vector<Eigen::Triplet<double>> trip;
    for (int r = 0; r < nrows; ++r) trip.emplace_back(r, idx[r], 1.0);
    Eigen::SparseMatrix<double> M(nrows, ncols);
    M.setFromTriplets(trip.begin(), trip.end());
    return M;
}

ObsBlockSpec gaussian_block(const std::string& name, const Eigen::VectorXd& y,
                            double log_tau) {
    ObsBlockSpec b;
    b.name = name;
    b.family = Family::GaussianFixedPrecision;
    b.y = y;
    b.fixed_family_value = log_tau;
    return b;
}

ObsBlockSpec intercept_gaussian(const Eigen::VectorXd& y, double log_tau) {
    ObsBlockSpec b = gaussian_block("obs", y, log_tau);
    b.fixed.coef_names = {"intercept"};
    b.fixed.X = Eigen::MatrixXd::Ones(y.size(), 1);
    return b;
}

} // namespace

TEST_CASE("intercept-only model assembles to one latent column of ones") {
    ModelSpec spec;
    spec.blocks.push_back(intercept_gaussian(Eigen::VectorXd::Constant(5, 1.0), 0.0));
    LatentSystem sys = assemble(spec);
    REQUIRE(sys.latent_dim() == 1);
    REQUIRE(sys.coef_names == std::vector<std::string>{"intercept"});
    Eigen::MatrixXd A = Eigen::MatrixXd(sys.build_A(sys.theta_init()));
    REQUIRE(A.rows() == 5);
    REQUIRE(A.cols() == 1);
    REQUIRE((A.array() == 1.0).all());
}

TEST_CASE("replicated spatial slices share hyper slots; shared temporal term appears once") {
    AdjacencyGraph g = make_graph(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
    auto leroux_term = [&](const std::string& name) {
        RandomTermSpec t;
        t.name = name;
        t.size = 4;
        t.hypers = {{"log_tau", Transform::Log, -6.0, 10.0, 0.0, false},
                    {"lambda", Transform::LogitUnit, -6.0, 6.0, 0.0, false}};
        t.build = [g](const std::vector<double>& nat) {
            return leroux_precision(g, nat[0], nat[1]);
        };
        return t;
    };
    ModelSpec spec;
    spec.terms.push_back(leroux_term("s1"));
    spec.terms.push_back(leroux_term("s2"));
    spec.terms[1].hypers.clear();
    spec.terms[1].share_hypers_with = "s1";
    spec.terms.push_back(leroux_term("s3"));
    spec.terms[2].hypers.clear();
    spec.terms[2].share_hypers_with = "s1";
    spec.terms.push_back(rw1_term("time", 6, 0.0, false));

    const int nt = 6;
    for (int k = 0; k < 3; ++k) {
        ObsBlockSpec b = gaussian_block("blk" + std::to_string(k),
                                        Eigen::VectorXd::Zero(nt), 0.0);
        b.fixed.coef_names = {"b" + std::to_string(k)};
        b.fixed.X = Eigen::MatrixXd::Ones(nt, 1);
        std::vector<int> area(nt);
        for (int i = 0; i < nt; ++i) area[i] = i % 4;
        b.bindings.push_back({"s" + std::to_string(k + 1), selector(nt, area, 4), -1});
        std::vector<int> tm(nt);
        for (int i = 0; i < nt; ++i) tm[i] = i;
        b.bindings.push_back({"time", selector(nt, tm, 6), -1});
        spec.blocks.push_back(b);
    }
    LatentSystem sys = assemble(spec);

    REQUIRE(sys.layout.slices.size() == 5);   // beta + 3 spatial + 1 temporal
    REQUIRE(sys.layout.at("s1").size == 4);
    REQUIRE(sys.layout.at("s2").size == 4);
    REQUIRE(sys.layout.at("s3").size == 4);
    REQUIRE(sys.layout.at("time").size == 6);

    // Slices partition the latent dimension exactly.
    int covered = 0;
    for (size_t i = 0; i < sys.layout.slices.size(); ++i) {
        REQUIRE(sys.layout.slices[i].offset == covered);
        covered += sys.layout.slices[i].size;
    }
    REQUIRE(covered == sys.latent_dim());

    // Replicas add no hyper slots of their own.
    REQUIRE(sys.n_hypers() == 3);   // s1.log_tau, s1.lambda, time.log_tau
    REQUIRE(sys.term_hyper_index[1] == sys.term_hyper_index[0]);
    REQUIRE(sys.term_hyper_index[2] == sys.term_hyper_index[0]);

    Eigen::SparseMatrix<double> A = sys.build_A(sys.theta_init());
    REQUIRE(A.cols() == sys.latent_dim());
    REQUIRE(A.rows() == 18);

    // Identical hypers give identical prior blocks for the replicas.
    Eigen::MatrixXd Qp = Eigen::MatrixXd(sys.build_Q_prior(sys.theta_init()));
    const Slice& s1 = sys.layout.at("s1");
    const Slice& s2 = sys.layout.at("s2");
    REQUIRE((Qp.block(s1.offset, s1.offset, 4, 4) -
             Qp.block(s2.offset, s2.offset, 4, 4))
                .cwiseAbs()
                .maxCoeff() < 1e-14);
}

TEST_CASE("dangling design column raises a spec error") {
    Table t;
    t.columns = {"x"};
    t.rows = {{1.0}, {2.0}};
    REQUIRE(thrown_code([&] { make_design(t, {"z"}); }) == "SpecError");
    Eigen::MatrixXd X = make_design(t, {"1", "x"});
    REQUIRE(X(1, 0) == 1.0);
    REQUIRE(X(1, 1) == 2.0);
}

TEST_CASE("scalar conjugate posterior is exact: mean 8/5, precision 5") {
    ModelSpec spec;
    spec.fixed_prior_precision = 1.0;
    spec.blocks.push_back(intercept_gaussian(Eigen::VectorXd::Constant(4, 2.0), 0.0));
    LatentSystem sys = assemble(spec);
    FitResult fit = fit_gaussian_approx(sys, sys.theta_init());

    REQUIRE(std::abs(fit.mode[0] - 8.0 / 5.0) < 1e-9);
    REQUIRE(std::abs(Eigen::MatrixXd(fit.H)(0, 0) - 5.0) < 1e-9);
    REQUIRE(fit.iterations == 1);   // quadratic objective, one Newton step

    // Laplace evidence is exact here: log of the Gaussian marginal of y.
    const double a = 5.0, b = 8.0, sum_y2 = 16.0;
    const double log_m = -2.0 * std::log(2.0 * M_PI) - 0.5 * std::log(a) -
                         0.5 * sum_y2 + 0.5 * b * b / a;
    REQUIRE(fit.log_evidence == Approx(log_m).margin(1e-9));
}

TEST_CASE("balanced Bernoulli intercept fits a mode at zero") {
    ModelSpec spec;
    ObsBlockSpec b;
    b.name = "obs";
    b.family = Family::Bernoulli;
    b.y.resize(10);
    for (int i = 0; i < 10; ++i) b.y[i] = i % 2;
    b.fixed.coef_names = {"intercept"};
    b.fixed.X = Eigen::MatrixXd::Ones(10, 1);
    spec.blocks.push_back(b);
    LatentSystem sys = assemble(spec);
    FitResult fit = fit_gaussian_approx(sys, sys.theta_init());
    REQUIRE(std::abs(fit.mode[0]) < 1e-8);
}

TEST_CASE("kernel derivatives match central finite differences for every family") {
    RngStream rng(404);
    const double h = 1e-5;
    auto check_rel = [](double got, double want, double tol) {
        REQUIRE(std::abs(got - want) <= tol * std::max(1.0, std::abs(want)));
    };

    for (int rep = 0; rep < 25; ++rep) {
        const double eta = -2.0 + 4.0 * rng.uniform();

        {   // Beta
            const double y = 0.05 + 0.9 * rng.uniform();
            const double phi = 2.0 + 8.0 * rng.uniform();
            auto f = [&](double e) { return beta_loglik(y, logistic(e), phi); };
            Deriv1 d = beta_eta_derivs(y, eta, phi);
            check_rel(d.d1, (f(eta + h) - f(eta - h)) / (2 * h), 1e-5);
            const double h2 = 1e-4;
            check_rel(d.d2,
                      (f(eta + h2) - 2 * f(eta) + f(eta - h2)) / (h2 * h2), 1e-5);
        }
        {   // Bernoulli
            const int z = rng.uniform() < 0.5 ? 0 : 1;
            auto f = [&](double e) { return bernoulli_loglik(z, e); };
            Deriv1 d = bernoulli_eta_derivs(z, eta);
            check_rel(d.d1, (f(eta + h) - f(eta - h)) / (2 * h), 1e-5);
            const double h2 = 1e-4;
            check_rel(d.d2,
                      (f(eta + h2) - 2 * f(eta) + f(eta - h2)) / (h2 * h2), 1e-5);
        }
        {   // Gaussian with fixed precision
            const double y = rng.normal();
            const double lt = -1.0 + 2.0 * rng.uniform();
            auto f = [&](double e) { return gaussian_fixed_loglik(y, e, lt); };
            Deriv1 d = gaussian_eta_derivs(y, eta, lt);
            check_rel(d.d1, (f(eta + h) - f(eta - h)) / (2 * h), 1e-5);
            const double h2 = 1e-4;
            check_rel(d.d2,
                      (f(eta + h2) - 2 * f(eta) + f(eta - h2)) / (h2 * h2), 1e-5);
        }
        {   // Dirichlet block: gradient and observed Hessian
            Composition y = close({0.2 + rng.uniform(), 0.2 + rng.uniform(),
                                   0.2 + rng.uniform()});
            Eigen::VectorXd etas(3);
            for (int d = 0; d < 3; ++d) etas[d] = -1.0 + 2.0 * rng.uniform();
            auto f = [&](const Eigen::VectorXd& e) {
                return dirichlet_eta_derivs(y, e).loglik;
            };
            DerivBlock db = dirichlet_eta_derivs(y, etas);
            for (int d = 0; d < 3; ++d) {
                Eigen::VectorXd ep = etas, em = etas;
                ep[d] += h;
                em[d] -= h;
                check_rel(db.grad[d], (f(ep) - f(em)) / (2 * h), 1e-5);
            }
            const double h2 = 5e-4;
            for (int d = 0; d < 3; ++d)
                for (int e = 0; e < 3; ++e) {
                    Eigen::VectorXd pp = etas, pm = etas, mp = etas, mm = etas;
                    pp[d] += h2; pp[e] += h2;
                    pm[d] += h2; pm[e] -= h2;
                    mp[d] -= h2; mp[e] += h2;
                    mm[d] -= h2; mm[e] -= h2;
                    const double fd =
                        (f(pp) - f(pm) - f(mp) + f(mm)) / (4 * h2 * h2);
                    check_rel(db.hess(d, e), fd, 2e-5);
                }
        }
    }
}

TEST_CASE("assembled system gradient matches finite differences of its log likelihood") {
    RngStream rng(77);
    ModelSpec spec;
    spec.terms.push_back(iid_term("u", 4, 0.3, true));

    {   // Beta block sharing the iid term
        ObsBlockSpec b;
        b.name = "beta_blk";
        b.family = Family::Beta;
        b.y.resize(6);
        for (int i = 0; i < 6; ++i) b.y[i] = 0.1 + 0.8 * rng.uniform();
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(6, 1);
        b.bindings.push_back({"u", selector(6, {0, 1, 2, 3, 0, 1}, 4), -1});
        b.hypers.push_back({"phi", Transform::Log, -6.0, 10.0, std::log(5.0), true});
        b.family_hyper = 0;
        spec.blocks.push_back(b);
    }
    {   // Bernoulli block
        ObsBlockSpec b;
        b.name = "bin_blk";
        b.family = Family::Bernoulli;
        b.y.resize(5);
        for (int i = 0; i < 5; ++i) b.y[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(5, 1);
        b.bindings.push_back({"u", selector(5, {1, 2, 3, 0, 2}, 4), -1});
        spec.blocks.push_back(b);
    }
    {   // Dirichlet block (observation-major predictor rows)
        ObsBlockSpec b;
        b.name = "comp_blk";
        b.family = Family::Dirichlet;
        b.ycomp.resize(4, 3);
        for (int i = 0; i < 4; ++i) {
            Composition c = close({0.3 + rng.uniform(), 0.3 + rng.uniform(),
                                   0.3 + rng.uniform()});
            for (int d = 0; d < 3; ++d) b.ycomp(i, d) = c.parts[d];
        }
        b.fixed.coef_names = {"a1", "a2", "a3"};
        b.fixed.X = Eigen::MatrixXd::Zero(12, 3);
        for (int i = 0; i < 4; ++i)
            for (int d = 0; d < 3; ++d) b.fixed.X(i * 3 + d, d) = 1.0;
        spec.blocks.push_back(b);
    }
    {   // Gaussian block
        ObsBlockSpec b = gaussian_block("gauss_blk", Eigen::VectorXd::Zero(5), 0.4);
        for (int i = 0; i < 5; ++i) b.y[i] = rng.normal();
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(5, 1);
        b.bindings.push_back({"u", selector(5, {3, 2, 1, 0, 3}, 4), -1});
        spec.blocks.push_back(b);
    }

    LatentSystem sys = assemble(spec);
    const Eigen::VectorXd theta = sys.theta_init();
    const Eigen::SparseMatrix<double> A = sys.build_A(theta);

    Eigen::VectorXd x(sys.latent_dim());
    for (int i = 0; i < x.size(); ++i) x[i] = 0.3 * rng.normal();
    const Eigen::VectorXd eta = A * x;
    const Eigen::VectorXd g = A.transpose() * system_grad(sys, theta, eta);

    const double h = 1e-5;
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd v(x.size());
        for (int i = 0; i < v.size(); ++i) v[i] = rng.normal();
        v.normalize();
        const double fp = system_loglik(sys, theta, A * (x + h * v));
        const double fm = system_loglik(sys, theta, A * (x - h * v));
        const double fd = (fp - fm) / (2 * h);
        REQUIRE(std::abs(g.dot(v) - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("all-Gaussian fit equals the dense conjugate posterior") {
    RngStream rng(2024);
    const int n = 200, m = 30;
    ModelSpec spec;
    spec.terms.push_back(iid_term("u", m, 0.4, true));
    ObsBlockSpec b = gaussian_block("obs", Eigen::VectorXd::Zero(n), -0.3);
    b.fixed.coef_names = {"intercept", "slope"};
    b.fixed.X.resize(n, 2);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) {
        b.fixed.X(i, 0) = 1.0;
        b.fixed.X(i, 1) = rng.normal();
        b.y[i] = rng.normal() + 0.5 * b.fixed.X(i, 1);
        idx[i] = i % m;
    }
    b.bindings.push_back({"u", selector(n, idx, m), -1});
    spec.blocks.push_back(b);

    LatentSystem sys = assemble(spec);
    const Eigen::VectorXd theta = sys.theta_init();
    FitResult fit = fit_gaussian_approx(sys, theta);

    const double tau = std::exp(-0.3);
    Eigen::MatrixXd A = Eigen::MatrixXd(sys.build_A(theta));
    Eigen::MatrixXd P = Eigen::MatrixXd(sys.build_Q_prior(theta)) +
                        tau * A.transpose() * A;
    Eigen::VectorXd mean = P.ldlt().solve(tau * A.transpose() * b.y);

    REQUIRE((fit.mode - mean).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE((Eigen::MatrixXd(fit.H) - P).cwiseAbs().maxCoeff() < 1e-9);
    REQUIRE(fit.iterations == 1);
    REQUIRE(fit.grad_norm < 1e-8);
}

TEST_CASE("sum-to-zero constrained slices fit with mean at zero") {
    RngStream rng(99);
    const int nt = 12, reps = 4, n = nt * reps;
    ModelSpec spec;
    spec.terms.push_back(rw1_term("time", nt, 0.5, true));
    ObsBlockSpec b = gaussian_block("obs", Eigen::VectorXd::Zero(n), 1.0);
    b.fixed.coef_names = {"intercept"};
    b.fixed.X = Eigen::MatrixXd::Ones(n, 1);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) {
        idx[i] = i % nt;
        b.y[i] = 0.7 + std::sin(2.0 * M_PI * idx[i] / nt) + 0.3 * rng.normal();
    }
    b.bindings.push_back({"time", selector(n, idx, nt), -1});
    spec.blocks.push_back(b);

    LatentSystem sys = assemble(spec);
    FitResult fit = fit_gaussian_approx(sys, sys.theta_init());
    const Slice& s = sys.layout.at("time");
    const Eigen::VectorXd slice = fit.mode.segment(s.offset, s.size);
    REQUIRE(std::abs(slice.mean()) < 1e-8);
    REQUIRE(slice.cwiseAbs().maxCoeff() > 0.5);   // the signal went somewhere
    REQUIRE(fit.grad_norm < 1e-8);
}

TEST_CASE("hyperparameter weights: single point, duplicates, and failure dropping") {
    RngStream rng(5150);
    Eigen::VectorXd y(30);
    for (int i = 0; i < 30; ++i) y[i] = 0.2 + rng.normal();
    ModelSpec spec;
    spec.blocks.push_back(intercept_gaussian(y, 0.0));
    LatentSystem sys = assemble(spec);

    OptimizeOptions opts;
    opts.explicit_points = {sys.theta_init()};
    PosteriorSummary one = optimize_hyperparameters(sys, opts);
    REQUIRE(one.points.size() == 1);
    REQUIRE(one.points[0].weight == Approx(1.0).margin(1e-12));

    opts.explicit_points = {sys.theta_init(), sys.theta_init()};
    PosteriorSummary two = optimize_hyperparameters(sys, opts);
    REQUIRE(two.points.size() == 2);
    REQUIRE(two.points[0].weight == Approx(0.5).margin(1e-10));
    REQUIRE(two.points[1].weight == Approx(0.5).margin(1e-10));
    double wsum = 0.0;
    for (const auto& p : two.points) wsum += p.weight;
    REQUIRE(std::abs(wsum - 1.0) < 1e-10);
    REQUIRE((two.latent_sd.array() >= 0.0).all());

    // An indefinite correlation point fails its fit and is dropped.
    ModelSpec cspec;
    RandomTermSpec corr;
    corr.name = "corr";
    corr.size = 3;
    corr.hypers = {{"rho", Transform::LogitSigned, -6.0, 6.0, 0.0, false}};
    corr.build = [](const std::vector<double>& nat) {
        Eigen::MatrixXd R = Eigen::MatrixXd::Identity(3, 3);
        R(0, 1) = R(1, 0) = R(0, 2) = R(2, 0) = R(1, 2) = R(2, 1) = nat[0];
        SparsePrecision P;
        P.Q = correlation_effect_precision({1.0, 1.0, 1.0}, R).sparseView();
        P.rank_deficiency = 0;
        return P;
    };
    cspec.terms.push_back(corr);
    ObsBlockSpec cb = gaussian_block("obs", Eigen::VectorXd::Zero(3), 0.0);
    cb.bindings.push_back({"corr", selector(3, {0, 1, 2}, 3), -1});
    cspec.blocks.push_back(cb);
    LatentSystem csys = assemble(cspec);

    Eigen::VectorXd ok(1), bad(1);
    ok[0] = 0.0;                     // rho = 0, positive definite
    bad[0] = logit(0.1);             // rho = -0.8, indefinite triple
    OptimizeOptions copts;
    copts.explicit_points = {ok, bad};
    PosteriorSummary kept = optimize_hyperparameters(csys, copts);
    REQUIRE(kept.points.size() == 1);
    REQUIRE(kept.points[0].theta[0] == 0.0);

    copts.explicit_points = {bad};
    REQUIRE(thrown_code([&] { optimize_hyperparameters(csys, copts); }) ==
            "AllPointsFailed");
}

TEST_CASE("noise precision is recovered within 0.3 on the log scale") {
    RngStream rng(314159);
    const int n = 500;
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = 0.8 + 0.5 * rng.normal();   // tau = 4

    ModelSpec spec;
    ObsBlockSpec b;
    b.name = "obs";
    b.family = Family::GaussianFixedPrecision;
    b.y = y;
    b.fixed.coef_names = {"intercept"};
    b.fixed.X = Eigen::MatrixXd::Ones(n, 1);
    b.hypers.push_back({"log_tau", Transform::Log, -6.0, 10.0, 0.0, false});
    b.family_hyper = 0;
    spec.blocks.push_back(b);

    LatentSystem sys = assemble(spec);
    PosteriorSummary post = optimize_hyperparameters(sys);
    REQUIRE(std::abs(post.theta_mode()[0] - std::log(4.0)) <= 0.3);

    double wsum = 0.0;
    for (const auto& p : post.points) wsum += p.weight;
    REQUIRE(std::abs(wsum - 1.0) < 1e-10);

    const FixedEffectSummary& fe = post.fixed_effects[0];
    REQUIRE(std::abs(fe.mean - 0.8) < 0.1);
    REQUIRE(fe.q025 < fe.q500);
    REQUIRE(fe.q500 < fe.q975);
    REQUIRE(std::abs(fe.q500 - fe.mean) < 0.02);
    REQUIRE(fe.sd >= 0.0);
}

TEST_CASE("degenerate posterior collapses WAIC to the mode fit") {
    // A dominating prior pins the latent, so the posterior variance, and with
    // it every per-observation log-density variance, collapses to zero.
    RngStream rng(42);
    const int n = 40;
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = 0.3 + rng.normal();
    ModelSpec spec;
    spec.fixed_prior_precision = 1e10;
    spec.blocks.push_back(intercept_gaussian(y, 0.0));
    LatentSystem sys = assemble(spec);
    PosteriorSummary post = optimize_hyperparameters(sys);
    RngStream wrng(7);
    WaicResult w = waic(sys, post, wrng);

    const Eigen::SparseMatrix<double> A = sys.build_A(post.theta_mode());
    const Eigen::VectorXd ll = per_observation_loglik(
        sys, post.theta_mode(), A * post.fits[post.best].mode);
    REQUIRE(w.p_waic < 1e-6);
    REQUIRE(std::abs(w.waic - (-2.0 * ll.sum())) < 1e-3);
}

TEST_CASE("WAIC matches the analytic predictive density within Monte Carlo error") {
    RngStream rng(271828);
    const int n = 20;
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) y[i] = 1.0 + rng.normal();
    ModelSpec spec;
    spec.fixed_prior_precision = 1.0;
    spec.blocks.push_back(intercept_gaussian(y, 0.0));
    LatentSystem sys = assemble(spec);
    PosteriorSummary post = optimize_hyperparameters(sys);
    RngStream wrng(8);
    WaicResult w = waic(sys, post, wrng, 200);

    const double m = y.sum() / (n + 1.0);
    const double v = 1.0 / (n + 1.0);
    double lppd_exact = 0.0;
    for (int i = 0; i < n; ++i) {
        const double s2 = 1.0 + v;
        lppd_exact += -0.5 * std::log(2.0 * M_PI * s2) -
                      0.5 * (y[i] - m) * (y[i] - m) / s2;
    }

    // Delta-method standard error of the summed lppd estimator from the draws.
    double se2 = 0.0;
    for (int i = 0; i < n; ++i) {
        Eigen::ArrayXd p = w.draws_loglik.col(i).array().exp();
        const double mean_p = p.mean();
        const double sd_p = std::sqrt((p - mean_p).square().sum() / (w.draws - 1));
        const double se = sd_p / (mean_p * std::sqrt(double(w.draws)));
        se2 += se * se;
    }
    REQUIRE(std::abs(w.lppd - lppd_exact) <= 3.0 * std::sqrt(se2) + 1e-12);
    REQUIRE(thrown_code([&] { waic(sys, post, wrng, 49); }) == "InsufficientDraws");
}

TEST_CASE("a pure-noise covariate does not lower WAIC in the median") {
    RngStream master(1618);
    std::vector<double> deltas;
    for (int rep = 0; rep < 20; ++rep) {
        RngStream rng(master.next_seed());
        const int n = 60;
        Eigen::VectorXd y(n), x(n);
        for (int i = 0; i < n; ++i) {
            y[i] = 0.5 + rng.normal();
            x[i] = rng.normal();
        }
        ModelSpec s0;
        s0.blocks.push_back(intercept_gaussian(y, 0.0));
        LatentSystem sys0 = assemble(s0);
        PosteriorSummary p0 = optimize_hyperparameters(sys0);
        RngStream r0(rng.next_seed());
        const double w0 = waic(sys0, p0, r0).waic;

        ModelSpec s1;
        ObsBlockSpec b = intercept_gaussian(y, 0.0);
        b.fixed.coef_names = {"intercept", "noise"};
        b.fixed.X.resize(n, 2);
        b.fixed.X.col(0).setOnes();
        b.fixed.X.col(1) = x;
        s1.blocks.push_back(b);
        LatentSystem sys1 = assemble(s1);
        PosteriorSummary p1 = optimize_hyperparameters(sys1);
        RngStream r1(rng.next_seed());
        const double w1 = waic(sys1, p1, r1).waic;

        deltas.push_back(w1 - w0);
    }
    std::sort(deltas.begin(), deltas.end());
    const double median = 0.5 * (deltas[9] + deltas[10]);
    REQUIRE(median >= 0.0);
}

TEST_CASE("stepwise search: inclusion, prefilter, and deterministic tie-break") {
    {   // single candidate that improves the score is included, then stop
        Eigen::MatrixXd C(4, 1);
        C << 1.0, 2.0, 3.0, 4.0;
        auto score = [](const std::vector<int>& sel) {
            return sel.empty() ? 10.0 : 5.0;
        };
        StepwiseResult r = stepwise_search(C, score);
        REQUIRE(r.selected == std::vector<int>{0});
        REQUIRE(r.final_score == 5.0);
        bool accepted_add = false;
        for (const auto& s : r.trace)
            if (s.action == "add" && s.accepted) accepted_add = true;
        REQUIRE(accepted_add);
    }
    {   // highly correlated pair: the later column is removed up front
        RngStream rng(11);
        Eigen::MatrixXd C(200, 2);
        for (int i = 0; i < 200; ++i) {
            C(i, 0) = rng.normal();
            C(i, 1) = 0.95 * C(i, 0) + 0.1 * rng.normal();
        }
        REQUIRE(std::abs(pearson_correlation(C.col(0), C.col(1))) > 0.9);
        auto score = [](const std::vector<int>&) { return 1.0; };
        StepwiseResult r = stepwise_search(C, score);
        REQUIRE(r.prefiltered == std::vector<int>{1});
        REQUIRE(r.selected.empty());
    }
    {   // equal improvements break toward the earlier candidate
        Eigen::MatrixXd C(4, 2);
        C << 1, 0, 0, 1, 1, 1, 0, 0;
        auto score = [](const std::vector<int>& sel) {
            if (sel.empty()) return 10.0;
            if (sel.size() == 1) return 5.0;
            return 6.0;   // adding the second one hurts
        };
        StepwiseResult r = stepwise_search(C, score);
        REQUIRE(r.selected == std::vector<int>{0});
    }
}

TEST_CASE("stepwise search drives WAIC to the true covariate pair") {
    RngStream rng(90210);
    const int n = 150, p = 6;
    Eigen::MatrixXd C(n, p);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p - 1; ++j) C(i, j) = rng.normal();
    for (int i = 0; i < n; ++i)
        C(i, 5) = 0.95 * C(i, 0) + 0.15 * rng.normal();   // redundant copy of c0
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i)
        y[i] = 0.3 + 1.0 * C(i, 0) + 0.8 * C(i, 1) + 0.5 * rng.normal();

    auto score = [&](const std::vector<int>& sel) {
        ModelSpec spec;
        ObsBlockSpec b = gaussian_block("obs", y, std::log(4.0));
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(n, 1);
        for (int c : sel) {
            b.fixed.coef_names.push_back("c" + std::to_string(c));
            b.fixed.X.conservativeResize(Eigen::NoChange, b.fixed.X.cols() + 1);
            b.fixed.X.col(b.fixed.X.cols() - 1) = C.col(c);
        }
        spec.blocks.push_back(b);
        LatentSystem sys = assemble(spec);
        PosteriorSummary post = optimize_hyperparameters(sys);
        RngStream wrng(1234567);   // common draws across candidate sets
        return waic(sys, post, wrng).waic;
    };

    StepwiseResult r = stepwise_search(C, score);
    REQUIRE(r.prefiltered == std::vector<int>{5});
    // Both signal covariates are found. A noise covariate may ride along on a
    // single dataset (the add threshold is an asymptotic coin with p ~ 0.16
    // per candidate); the exact-pair rate is a property of many replicates.
    REQUIRE(std::find(r.selected.begin(), r.selected.end(), 0) != r.selected.end());
    REQUIRE(std::find(r.selected.begin(), r.selected.end(), 1) != r.selected.end());
    REQUIRE(r.final_score < score({}));
}

TEST_CASE("simulation: zero fraction, Beta concentration, seeding, constraints") {
    {   // Bernoulli at eta = 0 has a balanced zero fraction
        ModelSpec spec;
        ObsBlockSpec b;
        b.name = "obs";
        b.family = Family::Bernoulli;
        b.y = Eigen::VectorXd::Zero(10000);
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(10000, 1);
        spec.blocks.push_back(b);
        LatentSystem sys = assemble(spec);
        RngStream rng(1);
        SimulateOptions so;
        so.fixed_slices["beta"] = Eigen::VectorXd::Zero(1);
        SimulatedData sim = simulate(sys, sys.theta_init(), rng, so);
        const double zero_frac = 1.0 - sim.block_y[0].mean();
        REQUIRE(std::abs(zero_frac - 0.5) < 0.02);
    }
    {   // huge Beta precision concentrates draws at the mean
        ModelSpec spec;
        ObsBlockSpec b;
        b.name = "obs";
        b.family = Family::Beta;
        b.y = Eigen::VectorXd::Zero(2000);
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(2000, 1);
        b.fixed_family_value = 1e4;
        spec.blocks.push_back(b);
        LatentSystem sys = assemble(spec);
        RngStream rng(2);
        SimulateOptions so;
        so.fixed_slices["beta"] = Eigen::VectorXd::Constant(1, logit(0.3));
        SimulatedData sim = simulate(sys, sys.theta_init(), rng, so);
        const Eigen::VectorXd& y = sim.block_y[0];
        const double mean = y.mean();
        const double sd = std::sqrt((y.array() - mean).square().sum() / (y.size() - 1));
        REQUIRE(std::abs(mean - 0.3) < 0.005);
        REQUIRE(sd < 0.01);
    }
    {   // same seed reproduces; constrained term draws sum to zero
        ModelSpec spec;
        spec.terms.push_back(rw1_term("time", 8, 0.7, true));
        ObsBlockSpec b = gaussian_block("obs", Eigen::VectorXd::Zero(8), 1.0);
        b.fixed.coef_names = {"intercept"};
        b.fixed.X = Eigen::MatrixXd::Ones(8, 1);
        b.bindings.push_back(
            {"time", selector(8, {0, 1, 2, 3, 4, 5, 6, 7}, 8), -1});
        spec.blocks.push_back(b);
        LatentSystem sys = assemble(spec);

        RngStream r1(777), r2(777), r3(778);
        SimulatedData a = simulate(sys, sys.theta_init(), r1);
        SimulatedData bsim = simulate(sys, sys.theta_init(), r2);
        SimulatedData c = simulate(sys, sys.theta_init(), r3);
        REQUIRE((a.latent - bsim.latent).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((a.block_y[0] - bsim.block_y[0]).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((a.block_y[0] - c.block_y[0]).cwiseAbs().maxCoeff() > 0.0);

        const Slice& s = sys.layout.at("time");
        REQUIRE(std::abs(a.latent.segment(s.offset, s.size).sum()) < 1e-10);
    }
}

TEST_CASE("Dirichlet intercept fit recovers composition means") {
    RngStream rng(333);
    const int n = 40;
    DirichletParams truth{{2.0, 3.0, 5.0}};
    ModelSpec spec;
    ObsBlockSpec b;
    b.name = "comp";
    b.family = Family::Dirichlet;
    b.ycomp.resize(n, 3);
    for (int i = 0; i < n; ++i) {
        Composition c = draw_dirichlet(rng, truth);
        for (int d = 0; d < 3; ++d) b.ycomp(i, d) = c.parts[d];
    }
    b.fixed.coef_names = {"a1", "a2", "a3"};
    b.fixed.X = Eigen::MatrixXd::Zero(3 * n, 3);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < 3; ++d) b.fixed.X(i * 3 + d, d) = 1.0;
    spec.blocks.push_back(b);

    LatentSystem sys = assemble(spec);
    FitResult fit = fit_gaussian_approx(sys, sys.theta_init());
    Eigen::VectorXd alpha = fit.mode.array().exp();
    Eigen::VectorXd fitted_mean = alpha / alpha.sum();
    for (int d = 0; d < 3; ++d)
        REQUIRE(std::abs(fitted_mean[d] - truth.alpha[d] / 10.0) < 0.08);
    REQUIRE(fit.grad_norm < 1e-8);
}
