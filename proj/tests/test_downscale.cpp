#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "costa/downscale.hpp"

using namespace costa;

TEST_CASE("polygon area and containment") {
    Polygon rect = rectangle_polygon(0, 2, 0, 1, "r");
    REQUIRE(rect.area() == Catch::Approx(2.0));
    REQUIRE(rect.contains({1.0, 0.5}));
    REQUIRE(!rect.contains({2.5, 0.5}));

    Polygon holed = rect;
    holed.rings.push_back({{0.5, 0.25}, {1.5, 0.25}, {1.5, 0.75}, {0.5, 0.75}});
    REQUIRE(holed.area() == Catch::Approx(2.0 - 0.5));
    REQUIRE(!holed.contains({1.0, 0.5}));
    REQUIRE(holed.contains({0.25, 0.5}));

    Polygon bowtie;
    bowtie.rings = {{{0, 0}, {1, 1}, {1, 0}, {0, 1}}};
    REQUIRE(!bowtie.is_simple());
    REQUIRE_THROWS_AS(bowtie.validate(), Error);
}

TEST_CASE("polygon json round trip") {
    std::vector<Polygon> polys = {rectangle_polygon(0, 1, 0, 1, "a"),
                                  rectangle_polygon(2, 3, 0, 2, "b")};
    auto j = polygons_to_json(polys);
    auto back = polygons_from_json(j);
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].name == "a");
    REQUIRE(back[1].area() == Catch::Approx(2.0));

    auto closed = nlohmann::json::parse(
        R"([{"name":"c","rings":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}])");
    auto cp = polygons_from_json(closed);
    REQUIRE(cp[0].rings[0].size() == 4);
    REQUIRE(cp[0].area() == Catch::Approx(1.0));
}

TEST_CASE("integration point generation") {
    AreaSupport sq;
    sq.areas = {rectangle_polygon(0, 1, 0, 1)};

    IntegrationScheme spaced = integration_points_spacing(sq, 0.5);
    REQUIRE(spaced.points[0].size() == 4);

    IntegrationScheme dense = integration_points(sq, 25);
    REQUIRE(dense.points[0].size() >= 25);
    dense.validate(sq);

    AreaSupport tri;
    Polygon t;
    t.rings = {{{0.0, 0.0}, {1.0, 0.0}, {0.5, 0.9}}};
    tri.areas = {t};
    IntegrationScheme ts = integration_points(tri, 25);
    ts.validate(tri);

    AreaSupport ell;
    Polygon L;
    L.rings = {{{0, 0}, {1, 0}, {1, 1}, {0.9, 1}, {0.9, 0.1}, {0, 0.1}}};
    ell.areas = {L};
    REQUIRE_THROWS_AS(integration_points_spacing(ell, 2.0), Error);
}

TEST_CASE("support overlap screen") {
    AreaSupport ok;
    ok.areas = {rectangle_polygon(0, 1, 0, 1), rectangle_polygon(1, 2, 0, 1)};
    REQUIRE_NOTHROW(ok.validate());

    AreaSupport bad;
    bad.areas = {rectangle_polygon(0, 1, 0, 1), rectangle_polygon(0.5, 1.5, 0, 1)};
    REQUIRE_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("aggregation matrix basics") {
    TriMesh mesh = structured_mesh({0, 1, 0, 1}, 3, 3);

    SECTION("single centre point area") {
        AreaSupport s;
        s.areas = {rectangle_polygon(0.48, 0.52, 0.48, 0.52)};
        AggregationMatrix A = aggregation_matrix(integration_points(s, 1), mesh);
        REQUIRE(A.M.coeff(0, 4) == Catch::Approx(1.0).margin(1e-12));
    }

    SECTION("two node-coincident points average to half") {
        AreaSupport s;
        s.areas = {rectangle_polygon(-0.1, 0.6, 0.4, 0.6)};
        IntegrationScheme scheme;
        scheme.points = {{{0.0, 0.5}, {0.5, 0.5}}};
        scheme.validate(s);
        AggregationMatrix A = aggregation_matrix(scheme, mesh);
        REQUIRE(A.M.coeff(0, 3) == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(A.M.coeff(0, 4) == Catch::Approx(0.5).margin(1e-12));
    }

    SECTION("constant field invariance") {
        AreaSupport s;
        s.areas = {rectangle_polygon(0.05, 0.6, 0.05, 0.45),
                   rectangle_polygon(0.65, 0.95, 0.5, 0.95)};
        AggregationMatrix A = aggregation_matrix(integration_points(s, 25), mesh);
        Eigen::VectorXd c = Eigen::VectorXd::Constant(mesh.n_vertices(), 3.25);
        Eigen::VectorXd avg = A.M * c;
        REQUIRE((avg.array() - 3.25).abs().maxCoeff() <= 1e-10);
    }

    SECTION("point outside mesh is an error") {
        AreaSupport s;
        s.areas = {rectangle_polygon(0.8, 1.4, 0.2, 0.6)};
        REQUIRE_THROWS_AS(aggregation_matrix(integration_points(s, 9), mesh), Error);
    }
}

TEST_CASE("refinement and nesting consistency") {
    TriMesh mesh = structured_mesh({0, 2, 0, 1}, 21, 11);
    Eigen::VectorXd field(mesh.n_vertices());
    for (int i = 0; i < mesh.n_vertices(); ++i) {
        const auto& v = mesh.vertices[i];
        field[i] = std::sin(v.x()) * (1.0 + 0.5 * v.y());
    }

    AreaSupport whole;
    whole.areas = {rectangle_polygon(0.05, 1.95, 0.05, 0.95)};
    double coarse = (aggregation_matrix(integration_points(whole, 25), mesh).M *
                     field)(0);
    double fine = (aggregation_matrix(integration_points(whole, 100), mesh).M *
                   field)(0);
    REQUIRE(std::abs(fine - coarse) <= 0.01 * std::abs(coarse));

    AreaSupport halves;
    halves.areas = {rectangle_polygon(0.05, 1.0, 0.05, 0.95),
                    rectangle_polygon(1.0, 1.95, 0.05, 0.95)};
    Eigen::VectorXd sub =
        aggregation_matrix(integration_points(halves, 100), mesh).M * field;
    const double w1 = halves.areas[0].area();
    const double w2 = halves.areas[1].area();
    const double merged = (w1 * sub[0] + w2 * sub[1]) / (w1 + w2);
    REQUIRE(std::abs(merged - fine) <= 0.02 * std::abs(fine));
}

TEST_CASE("stacked support operator") {
    TriMesh mesh = structured_mesh({0, 1, 0, 1}, 3, 3);

    SECTION("single support single time reduces to aggregation") {
        AreaSupport s;
        s.areas = {rectangle_polygon(0.1, 0.9, 0.1, 0.9)};
        s.t_begin = 0;
        s.t_end = 1;
        StackedAggregation st = stacked_support_matrix({s}, mesh, 1, 25);
        AggregationMatrix A = aggregation_matrix(integration_points(s, 25), mesh);
        REQUIRE((Eigen::MatrixXd(st.M) - Eigen::MatrixXd(A.M)).cwiseAbs().maxCoeff() <=
                1e-14);
    }

    SECTION("two supports across two times stack blockwise") {
        AreaSupport s0, s1;
        s0.areas = {rectangle_polygon(0.1, 0.9, 0.1, 0.9)};
        s0.t_begin = 0;
        s0.t_end = 1;
        s1.areas = {rectangle_polygon(0.1, 0.45, 0.1, 0.9),
                    rectangle_polygon(0.55, 0.9, 0.1, 0.9)};
        s1.t_begin = 1;
        s1.t_end = 2;
        const int n_times = 2;
        StackedAggregation st = stacked_support_matrix({s0, s1}, mesh, n_times, 25);
        REQUIRE(st.M.rows() == 3);
        REQUIRE(st.M.cols() == mesh.n_vertices() * n_times);
        REQUIRE(st.keys[0].time == 0);
        REQUIRE(st.keys[1].time == 1);
        REQUIRE(st.keys[2].area == 1);
        Eigen::MatrixXd D(st.M);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < D.cols(); ++c)
                if (D(r, c) != 0.0) REQUIRE(c % n_times == st.keys[r].time);

        Eigen::VectorXd ones = Eigen::VectorXd::Ones(D.cols());
        REQUIRE(((D * ones).array() - 1.0).abs().maxCoeff() <= 1e-10);
    }

    SECTION("uncovered or doubly covered times fail") {
        AreaSupport s;
        s.areas = {rectangle_polygon(0.1, 0.9, 0.1, 0.9)};
        s.t_begin = 0;
        s.t_end = 1;
        REQUIRE_THROWS_AS(stacked_support_matrix({s}, mesh, 2, 25), Error);
        AreaSupport dup = s;
        REQUIRE_THROWS_AS(stacked_support_matrix({s, dup}, mesh, 1, 25), Error);
    }
}

TEST_CASE("sparse coo round trip") {
    Eigen::SparseMatrix<double> M(3, 4);
    M.insert(0, 1) = 1.5;
    M.insert(2, 3) = -0.25;
    M.insert(1, 0) = 1e-17;
    M.makeCompressed();
    std::ostringstream out;
    write_sparse_coo(out, M, {"test matrix"});
    std::istringstream in(out.str());
    Eigen::SparseMatrix<double> back = read_sparse_coo(in);
    REQUIRE(back.rows() == 3);
    REQUIRE(back.cols() == 4);
    REQUIRE((Eigen::MatrixXd(back) - Eigen::MatrixXd(M)).cwiseAbs().maxCoeff() == 0.0);
}
