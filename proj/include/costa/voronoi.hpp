#ifndef COSTA_VORONOI_HPP
#define COSTA_VORONOI_HPP

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "downscale.hpp"
#include "geometry.hpp"
#include "graph_precision.hpp"

/**
 * @file voronoi.hpp
 * @brief Voronoi tessellation of a rectangle: areal supports plus the
 *        shared-edge adjacency graph, from seeded random or given sites.
 *
 * Cells are built by clipping the box against each perpendicular bisector
 * (Sutherland-Hodgman on convex polygons, O(n^2) overall), which is robust
 * and ample for the tens-of-areas scale used here. Adjacency falls out of
 * the clip: an edge lying on the bisector against site j marks j a neighbor,
 * so corner-touching cells (zero-length edges) are never adjacent.
 */

namespace costa {

struct VoronoiSupportRequest {
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
    int n_seeds = 2;
    std::uint64_t seed = 1;
};

struct VoronoiSupport {
    AreaSupport support;
    AdjacencyGraph adjacency;
    std::vector<Eigen::Vector2d> sites;
};

namespace detail {

struct LabeledVertex {
    Eigen::Vector2d p;
    int edge_label;   // source of the edge leaving this vertex; -1 = box side
};

/** Clip a convex labeled polygon against n.p <= c; cut edges get `label`. */
inline std::vector<LabeledVertex> clip_halfplane(
    const std::vector<LabeledVertex>& poly, const Eigen::Vector2d& n, double c,
    int label) {
    std::vector<LabeledVertex> out;
    const size_t m = poly.size();
    for (size_t k = 0; k < m; ++k) {
        const LabeledVertex& a = poly[k];
        const LabeledVertex& b = poly[(k + 1) % m];
        const double fa = n.dot(a.p) - c;
        const double fb = n.dot(b.p) - c;
        const bool ain = fa <= 0.0, bin = fb <= 0.0;
        if (ain) out.push_back(a);
        if (ain != bin) {
            const double t = fa / (fa - fb);
            const Eigen::Vector2d ip = a.p + t * (b.p - a.p);
            // Leaving the half-plane: the polygon continues along the clip
            // line, so the intersection starts an edge labeled by the cutter.
            // Entering: the remainder of the original edge keeps its label.
            out.push_back({ip, ain ? label : a.edge_label});
        }
    }
    return out;
}

} // namespace detail

inline VoronoiSupport voronoi_support_from_sites(
    const std::vector<Eigen::Vector2d>& sites, double xmin, double xmax,
    double ymin, double ymax) {
    const int n = static_cast<int>(sites.size());
    require(n >= 2, "DegenerateSeeds", "need at least 2 seeds");
    const double diag = std::hypot(xmax - xmin, ymax - ymin);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            require((sites[i] - sites[j]).norm() > 1e-9 * diag,
                    "DegenerateSeeds",
                    "sites " + std::to_string(i) + " and " + std::to_string(j) +
                        " coincide");

    const double edge_tol = 1e-12 * diag;
    std::vector<std::pair<int, int>> edges;
    VoronoiSupport out;
    out.sites = sites;

    for (int i = 0; i < n; ++i) {
        std::vector<detail::LabeledVertex> cell = {
            {{xmin, ymin}, -1}, {{xmax, ymin}, -1},
            {{xmax, ymax}, -1}, {{xmin, ymax}, -1}};
        for (int j = 0; j < n && !cell.empty(); ++j) {
            if (j == i) continue;
            const Eigen::Vector2d nv = sites[j] - sites[i];
            const double c = 0.5 * (sites[j].squaredNorm() - sites[i].squaredNorm());
            cell = detail::clip_halfplane(cell, nv, c, j);
        }
        require(cell.size() >= 3, "DegenerateSeeds",
                "cell " + std::to_string(i) + " collapsed");

        Polygon poly;
        poly.name = "cell_" + std::to_string(i);
        std::vector<Eigen::Vector2d> ring;
        for (size_t k = 0; k < cell.size(); ++k) {
            const auto& a = cell[k];
            const auto& b = cell[(k + 1) % cell.size()];
            if ((b.p - a.p).norm() <= edge_tol) continue;   // corner touch
            ring.push_back(a.p);
            if (a.edge_label >= 0)
                edges.emplace_back(std::min(i, a.edge_label),
                                   std::max(i, a.edge_label));
        }
        poly.rings.push_back(std::move(ring));
        poly.validate();
        out.support.areas.push_back(std::move(poly));
    }

    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    out.adjacency = make_graph(n, edges);
    out.support.validate();

    double area_sum = 0.0;
    for (const auto& a : out.support.areas) area_sum += a.area();
    const double box_area = (xmax - xmin) * (ymax - ymin);
    require(std::abs(area_sum - box_area) <= 1e-6 * box_area, "MalformedGeometry",
            "cells do not tile the box: " + std::to_string(area_sum) + " vs " +
                std::to_string(box_area));
    return out;
}

inline VoronoiSupport voronoi_support(const VoronoiSupportRequest& req) {
    require(req.n_seeds >= 2, "DegenerateSeeds", "need at least 2 seeds");
    require(req.xmax > req.xmin && req.ymax > req.ymin, "MalformedGeometry",
            "empty bounding box");

    std::vector<Eigen::Vector2d> sites;
    RngStream rng(req.seed);
    for (int i = 0; i < req.n_seeds; ++i) {
        const double x = req.xmin + (req.xmax - req.xmin) * rng.uniform();
        const double y = req.ymin + (req.ymax - req.ymin) * rng.uniform();
        sites.emplace_back(x, y);
    }
    return voronoi_support_from_sites(sites, req.xmin, req.xmax, req.ymin,
                                      req.ymax);
}

} // namespace costa

#endif
