#include <catch2/catch_amalgamated.hpp>

#include <costa/voronoi.hpp>

using namespace costa;

namespace {

std::string thrown_code(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

} // namespace

TEST_CASE("two sites split the box into adjacent half-planes") {
    std::vector<Eigen::Vector2d> sites = {{0.25, 0.5}, {0.75, 0.5}};
    auto v = voronoi_support_from_sites(sites, 0.0, 1.0, 0.0, 1.0);

    REQUIRE(v.support.n_areas() == 2);
    CHECK(v.support.areas[0].area() == Catch::Approx(0.5).margin(1e-12));
    CHECK(v.support.areas[1].area() == Catch::Approx(0.5).margin(1e-12));
    CHECK(v.support.areas[0].contains({0.1, 0.5}));
    CHECK_FALSE(v.support.areas[0].contains({0.9, 0.5}));
    CHECK(v.adjacency.W.coeff(0, 1) == 1.0);
    CHECK(v.adjacency.W.coeff(1, 0) == 1.0);
    CHECK(v.adjacency.degrees().sum() == Catch::Approx(2.0));
}

TEST_CASE("four corner sites give four congruent cells and four adjacencies") {
    std::vector<Eigen::Vector2d> sites = {
        {0.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}};
    auto v = voronoi_support_from_sites(sites, 0.0, 1.0, 0.0, 1.0);

    REQUIRE(v.support.n_areas() == 4);
    for (const auto& a : v.support.areas)
        CHECK(a.area() == Catch::Approx(0.25).margin(1e-12));

    // Quadrants share edges horizontally and vertically, never diagonally.
    int n_edges = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            if (v.adjacency.W.coeff(i, j) != 0.0) ++n_edges;
    CHECK(n_edges == 4);
    CHECK(v.adjacency.W.coeff(0, 3) == 0.0);   // (0,0) vs (1,1) touch at a point
    CHECK(v.adjacency.W.coeff(1, 2) == 0.0);
}

TEST_CASE("random tessellations tile the box and are deterministic") {
    for (int n : {5, 17, 40}) {
        VoronoiSupportRequest req;
        req.xmin = -2.0; req.xmax = 8.0; req.ymin = 1.0; req.ymax = 6.0;
        req.n_seeds = n;
        req.seed = 977 + n;
        auto v = voronoi_support(req);

        REQUIRE(v.support.n_areas() == n);
        double sum = 0.0;
        for (const auto& a : v.support.areas) sum += a.area();
        CHECK(sum == Catch::Approx(50.0).epsilon(1e-6));
        CHECK(v.adjacency.connected());

        // Every site sits in its own cell.
        for (int i = 0; i < n; ++i) CHECK(v.support.areas[i].contains(v.sites[i]));

        auto w = voronoi_support(req);
        for (int i = 0; i < n; ++i) {
            REQUIRE(w.support.areas[i].rings[0].size() ==
                    v.support.areas[i].rings[0].size());
            for (size_t k = 0; k < v.support.areas[i].rings[0].size(); ++k)
                CHECK(v.support.areas[i].rings[0][k] ==
                      w.support.areas[i].rings[0][k]);
        }
        CHECK((Eigen::MatrixXd(v.adjacency.W) - Eigen::MatrixXd(w.adjacency.W))
                  .norm() == 0.0);
    }
}

TEST_CASE("degenerate requests are rejected") {
    CHECK(thrown_code([] {
              std::vector<Eigen::Vector2d> s = {{0.5, 0.5}, {0.5, 0.5}};
              voronoi_support_from_sites(s, 0, 1, 0, 1);
          }) == "DegenerateSeeds");
    CHECK(thrown_code([] {
              std::vector<Eigen::Vector2d> s = {{0.5, 0.5}};
              voronoi_support_from_sites(s, 0, 1, 0, 1);
          }) == "DegenerateSeeds");
    VoronoiSupportRequest req;
    req.n_seeds = 1;
    CHECK(thrown_code([&] { voronoi_support(req); }) == "DegenerateSeeds");
}
