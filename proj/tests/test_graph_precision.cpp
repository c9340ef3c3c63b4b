#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "costa/graph_precision.hpp"

using namespace costa;

namespace {

AdjacencyGraph path3() { return make_graph(3, {{0, 1}, {1, 2}}); }

AdjacencyGraph random_connected_graph(RngStream& rng, int n) {
    std::vector<std::pair<int, int>> edges;
    for (int v = 1; v < n; ++v)
        edges.emplace_back(v, static_cast<int>(rng.uniform() * v));
    const int extra = n / 2;
    for (int e = 0; e < extra; ++e) {
        int i = static_cast<int>(rng.uniform() * n);
        int j = static_cast<int>(rng.uniform() * n);
        if (i != j) edges.emplace_back(i, j);
    }
    return make_graph(n, edges);
}

void check_symmetric_psd(const Eigen::MatrixXd& Q) {
    REQUIRE((Q - Q.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    REQUIRE(lo >= -1e-8 * hi);
}

} // namespace

TEST_CASE("row normalization") {
    AdjacencyGraph two = row_normalize(make_graph(2, {{0, 1}}));
    REQUIRE(two.W.coeff(0, 1) == 1.0);
    REQUIRE(two.W.coeff(1, 0) == 1.0);

    AdjacencyGraph p = row_normalize(path3());
    REQUIRE(p.W.coeff(1, 0) == Catch::Approx(0.5));
    REQUIRE(p.W.coeff(1, 2) == Catch::Approx(0.5));
    REQUIRE(p.W.coeff(0, 1) == Catch::Approx(1.0));

    AdjacencyGraph iso = make_graph(3, {{0, 1}});
    REQUIRE_THROWS_AS(row_normalize(iso), Error);
}

TEST_CASE("besag precision") {
    SparsePrecision p = besag_precision(path3(), 1.0);
    Eigen::MatrixXd Q(p.Q);
    Eigen::MatrixXd want(3, 3);
    want << 1, -1, 0, -1, 2, -1, 0, -1, 1;
    REQUIRE((Q - want).cwiseAbs().maxCoeff() <= 1e-15);
    REQUIRE(p.rank_deficiency == 1);

    SparsePrecision p2 = besag_precision(path3(), 2.0);
    REQUIRE((Eigen::MatrixXd(p2.Q) - 2.0 * want).cwiseAbs().maxCoeff() <= 1e-15);

    RngStream rng(11);
    AdjacencyGraph g = random_connected_graph(rng, 25);
    SparsePrecision pg = besag_precision(g, 1.7);
    Eigen::VectorXd rs = Eigen::MatrixXd(pg.Q).rowwise().sum();
    REQUIRE(rs.cwiseAbs().maxCoeff() <= 1e-12);
    check_symmetric_psd(Eigen::MatrixXd(pg.Q));

    AdjacencyGraph disc = make_graph(4, {{0, 1}, {2, 3}});
    REQUIRE_THROWS_AS(besag_precision(disc, 1.0), Error);
}

TEST_CASE("leroux precision") {
    AdjacencyGraph g = path3();
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(3, 3);

    REQUIRE((Eigen::MatrixXd(leroux_precision(g, 2.5, 0.0).Q) - 2.5 * I)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);

    Eigen::MatrixXd besag(3, 3);
    besag << 1, -1, 0, -1, 2, -1, 0, -1, 1;
    REQUIRE((Eigen::MatrixXd(leroux_precision(g, 1.0, 1.0).Q) - besag)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);
    REQUIRE(leroux_precision(g, 1.0, 1.0).rank_deficiency == 1);

    Eigen::MatrixXd half(3, 3);
    half << 1.0, -0.5, 0.0, -0.5, 1.5, -0.5, 0.0, -0.5, 1.0;
    REQUIRE((Eigen::MatrixXd(leroux_precision(g, 1.0, 0.5).Q) - half)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);
    REQUIRE(leroux_precision(g, 1.0, 0.5).rank_deficiency == 0);

    RngStream rng(3);
    for (int rep = 0; rep < 5; ++rep) {
        AdjacencyGraph rg = random_connected_graph(rng, 30);
        const double tau = 0.5 + rng.uniform();
        const double lam = rng.uniform();
        SparsePrecision p = leroux_precision(rg, tau, lam);
        Eigen::VectorXd rs = Eigen::MatrixXd(p.Q).rowwise().sum();
        for (int i = 0; i < rg.n; ++i)
            REQUIRE(rs[i] == Catch::Approx(tau * (1.0 - lam)).margin(1e-12));
        check_symmetric_psd(Eigen::MatrixXd(p.Q));
    }

    REQUIRE_THROWS_AS(leroux_precision(g, 1.0, 1.5), Error);
    REQUIRE_THROWS_AS(leroux_precision(g, -1.0, 0.5), Error);
}

TEST_CASE("rw1 precision") {
    Eigen::MatrixXd want(3, 3);
    want << 1, -1, 0, -1, 2, -1, 0, -1, 1;
    SparsePrecision p = rw1_precision(3, 1.0);
    REQUIRE((Eigen::MatrixXd(p.Q) - want).cwiseAbs().maxCoeff() <= 1e-15);
    REQUIRE(p.rank_deficiency == 1);
    REQUIRE(Eigen::MatrixXd(p.Q).rowwise().sum().cwiseAbs().maxCoeff() == 0.0);

    Eigen::MatrixXd want2(2, 2);
    want2 << 1, -1, -1, 1;
    REQUIRE((Eigen::MatrixXd(rw1_precision(2, 3.0).Q) - 3.0 * want2)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);
}

TEST_CASE("ar1 precision") {
    Eigen::MatrixXd I5 = Eigen::MatrixXd::Identity(5, 5);
    REQUIRE((Eigen::MatrixXd(ar1_precision(5, 2.0, 0.0).Q) - 2.0 * I5)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);

    const double tau = 1.3, phi = 0.6;
    Eigen::MatrixXd S2(2, 2);
    S2 << 1.0 / tau, phi / tau, phi / tau, 1.0 / tau;
    Eigen::MatrixXd Q2(ar1_precision(2, tau, phi).Q);
    REQUIRE((Q2 - S2.inverse()).cwiseAbs().maxCoeff() <= 1e-12);

    const int n = 5;
    Eigen::MatrixXd S(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) S(i, j) = std::pow(0.7, std::abs(i - j)) / tau;
    Eigen::MatrixXd QS = Eigen::MatrixXd(ar1_precision(n, tau, 0.7).Q) * S;
    REQUIRE((QS - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() <= 1e-8);

    REQUIRE_THROWS_AS(ar1_precision(5, 1.0, 1.0), Error);
    REQUIRE_THROWS_AS(ar1_precision(5, 1.0, -1.2), Error);
}

TEST_CASE("kronecker interaction types") {
    SparsePrecision Qs = besag_precision(path3(), 1.0);
    SparsePrecision Qt = rw1_precision(3, 1.0);
    SparsePrecision Qs2 = iid_precision(2, 1.0);

    SparsePrecision t1 = kronecker_interaction(Qs2, Qt, InteractionType::I, 2.0);
    REQUIRE((Eigen::MatrixXd(t1.Q) - 2.0 * Eigen::MatrixXd::Identity(6, 6))
                .cwiseAbs()
                .maxCoeff() <= 1e-15);
    REQUIRE(t1.rank_deficiency == 0);

    SparsePrecision rw2 = rw1_precision(2, 1.0);
    SparsePrecision t2 = kronecker_interaction(Qs2, rw2, InteractionType::II, 1.0);
    Eigen::MatrixXd T2(t2.Q);
    REQUIRE(T2.block(0, 0, 2, 2) == Eigen::MatrixXd(rw2.Q));
    REQUIRE(T2.block(2, 2, 2, 2) == Eigen::MatrixXd(rw2.Q));
    REQUIRE(T2.block(0, 2, 2, 2).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(t2.rank_deficiency == 2);

    SparsePrecision t4 = kronecker_interaction(Qs, Qt, InteractionType::IV, 1.0);
    REQUIRE(t4.rank_deficiency == 9 - 2 * 2);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(t4.Q));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ess(Eigen::MatrixXd(Qs.Q));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> est(Eigen::MatrixXd(Qt.Q));
    std::vector<double> prod;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            prod.push_back(ess.eigenvalues()[i] * est.eigenvalues()[j]);
    std::sort(prod.begin(), prod.end());
    Eigen::VectorXd got = es.eigenvalues();
    for (int k = 0; k < 9; ++k)
        REQUIRE(got[k] == Catch::Approx(prod[k]).margin(1e-8));
}

TEST_CASE("slm error precision") {
    AdjacencyGraph g = row_normalize(make_graph(2, {{0, 1}}));
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    REQUIRE((Eigen::MatrixXd(slm_error_precision(g, 3.0, 0.0).Q) - 3.0 * I2)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);

    Eigen::MatrixXd want(2, 2);
    want << 1.25, -1.0, -1.0, 1.25;
    REQUIRE((Eigen::MatrixXd(slm_error_precision(g, 1.0, 0.5).Q) - want)
                .cwiseAbs()
                .maxCoeff() <= 1e-12);

    RngStream rng(5);
    AdjacencyGraph rg = row_normalize(random_connected_graph(rng, 20));
    for (int rep = 0; rep < 10; ++rep) {
        const double rho = -0.9 + 1.8 * rng.uniform();
        Eigen::MatrixXd Q(slm_error_precision(rg, 1.0, rho).Q);
        Eigen::LLT<Eigen::MatrixXd> llt(Q);
        REQUIRE(llt.info() == Eigen::Success);
    }

    AdjacencyGraph raw = make_graph(2, {{0, 1}});
    REQUIRE_THROWS_AS(slm_error_precision(raw, 1.0, 0.5), Error);
}

TEST_CASE("slm design transform") {
    AdjacencyGraph g = row_normalize(make_graph(2, {{0, 1}}));
    Eigen::MatrixXd X(2, 1);
    X << 1.0, 1.0;
    REQUIRE(slm_design_transform(X, g, 0.0) == X);

    Eigen::MatrixXd Z = slm_design_transform(X, g, 0.5);
    REQUIRE(Z(0, 0) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
    REQUIRE(Z(1, 0) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));

    RngStream rng(9);
    AdjacencyGraph rg = row_normalize(random_connected_graph(rng, 15));
    Eigen::MatrixXd Xr(15, 3);
    for (int i = 0; i < Xr.size(); ++i) Xr.data()[i] = rng.normal();
    const double rho = 0.4;
    Eigen::MatrixXd Zr = slm_design_transform(Xr, rg, rho);
    Eigen::MatrixXd resid = (Eigen::MatrixXd::Identity(15, 15) +
                             rho * Eigen::MatrixXd(rg.W)) * Zr - Xr;
    REQUIRE(resid.cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("correlation effect precision") {
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, 2);
    REQUIRE((correlation_effect_precision({1.0, 1.0}, z) -
             Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);

    Eigen::MatrixXd r(2, 2);
    r << 0.0, -0.5, -0.5, 0.0;
    Eigen::MatrixXd want(2, 2);
    want << 1.0, -0.5, -0.5, 1.0;
    REQUIRE((correlation_effect_precision({1.0, 1.0}, r) - want)
                .cwiseAbs()
                .maxCoeff() <= 1e-15);

    Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(3, 3);
    bad(0, 1) = bad(1, 0) = bad(0, 2) = bad(2, 0) = bad(1, 2) = bad(2, 1) = -0.9;
    REQUIRE_THROWS_AS(correlation_effect_precision({1.0, 1.0, 1.0}, bad), Error);

    Eigen::MatrixXd r2(2, 2);
    r2 << 0.0, 0.3, 0.3, 0.0;
    Eigen::MatrixXd Q = correlation_effect_precision({4.0, 9.0}, r2);
    REQUIRE(Q(0, 0) == 4.0);
    REQUIRE(Q(1, 1) == 9.0);
    REQUIRE(Q(0, 1) == Catch::Approx(0.3 / 6.0).epsilon(1e-14));
}

TEST_CASE("adjacency pair ingestion") {
    std::istringstream in("# pairs\n0 1\n1,2\n");
    AdjacencyGraph g = read_adjacency_pairs(in, 3);
    REQUIRE(g.W.coeff(0, 1) == 1.0);
    REQUIRE(g.W.coeff(2, 1) == 1.0);
    REQUIRE(g.W.coeff(0, 2) == 0.0);
    REQUIRE(g.connected());
}
