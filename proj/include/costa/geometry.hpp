#ifndef COSTA_GEOMETRY_HPP
#define COSTA_GEOMETRY_HPP

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"

/**
 * @file geometry.hpp
 * @brief Simple polygons (outer ring plus optional holes), containment and
 *        area computations, and JSON ingestion of named polygon sets.
 *
 * Rings are stored open (no repeated closing vertex); ingestion drops a
 * duplicated closing point. Containment uses even-odd ray casting, so holes
 * are handled by listing them as additional rings.
 */

namespace costa {

struct Polygon {
    std::string name;
    std::vector<std::vector<Eigen::Vector2d>> rings;   // rings[0] outer, rest holes

    static double ring_signed_area(const std::vector<Eigen::Vector2d>& ring) {
        double s = 0.0;
        const size_t n = ring.size();
        for (size_t i = 0; i < n; ++i) {
            const auto& a = ring[i];
            const auto& b = ring[(i + 1) % n];
            s += a.x() * b.y() - b.x() * a.y();
        }
        return 0.5 * s;
    }

    /** Outer area minus hole areas. */
    double area() const {
        require(!rings.empty(), "EmptyArea", "polygon has no rings");
        double s = std::abs(ring_signed_area(rings[0]));
        for (size_t r = 1; r < rings.size(); ++r)
            s -= std::abs(ring_signed_area(rings[r]));
        return s;
    }

    /** Even-odd rule over all rings; boundary points count as inside. */
    bool contains(const Eigen::Vector2d& p) const {
        bool inside = false;
        for (const auto& ring : rings) {
            const size_t n = ring.size();
            for (size_t i = 0, j = n - 1; i < n; j = i++) {
                const auto& a = ring[i];
                const auto& b = ring[j];
                if ((a.y() > p.y()) != (b.y() > p.y())) {
                    const double x_cross =
                        a.x() + (p.y() - a.y()) / (b.y() - a.y()) * (b.x() - a.x());
                    if (p.x() < x_cross) inside = !inside;
                }
            }
        }
        return inside;
    }

    struct Bounds {
        double xmin, xmax, ymin, ymax;
    };

    Bounds bounds() const {
        Bounds b{std::numeric_limits<double>::infinity(),
                 -std::numeric_limits<double>::infinity(),
                 std::numeric_limits<double>::infinity(),
                 -std::numeric_limits<double>::infinity()};
        for (const auto& ring : rings)
            for (const auto& p : ring) {
                b.xmin = std::min(b.xmin, p.x());
                b.xmax = std::max(b.xmax, p.x());
                b.ymin = std::min(b.ymin, p.y());
                b.ymax = std::max(b.ymax, p.y());
            }
        return b;
    }

    void validate() const {
        require(!rings.empty(), "EmptyArea", "polygon has no rings");
        for (const auto& ring : rings)
            require(ring.size() >= 3, "DegenerateRing", "ring needs >= 3 vertices");
        require(area() > 0.0, "EmptyArea", "polygon has no area");
        require(is_simple(), "SelfIntersection",
                "polygon ring self-intersects: " + name);
    }

    /** Pairwise proper segment intersection test per ring (O(n^2), small rings). */
    bool is_simple() const {
        auto proper_cross = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b,
                               const Eigen::Vector2d& c, const Eigen::Vector2d& d) {
            auto orient = [](const Eigen::Vector2d& p, const Eigen::Vector2d& q,
                             const Eigen::Vector2d& r) {
                return (q.x() - p.x()) * (r.y() - p.y()) -
                       (q.y() - p.y()) * (r.x() - p.x());
            };
            const double o1 = orient(a, b, c), o2 = orient(a, b, d);
            const double o3 = orient(c, d, a), o4 = orient(c, d, b);
            return ((o1 > 0) != (o2 > 0)) && ((o3 > 0) != (o4 > 0));
        };
        for (const auto& ring : rings) {
            const size_t n = ring.size();
            for (size_t i = 0; i < n; ++i)
                for (size_t j = i + 1; j < n; ++j) {
                    if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
                    if (proper_cross(ring[i], ring[(i + 1) % n], ring[j],
                                     ring[(j + 1) % n]))
                        return false;
                }
        }
        return true;
    }
};

inline Polygon rectangle_polygon(double xmin, double xmax, double ymin, double ymax,
                                 std::string name = "") {
    Polygon p;
    p.name = std::move(name);
    p.rings = {{{xmin, ymin}, {xmax, ymin}, {xmax, ymax}, {xmin, ymax}}};
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------
// JSON ingestion: an array of {"name": ..., "rings": [[[x,y], ...], ...]}.
// ---------------------------------------------------------------------------

inline std::vector<Polygon> polygons_from_json(const nlohmann::json& j) {
    require(j.is_array(), "MalformedGeometry", "expected a top-level polygon array");
    std::vector<Polygon> out;
    for (const auto& pj : j) {
        Polygon p;
        p.name = pj.value("name", "");
        require(pj.contains("rings"), "MalformedGeometry",
                "polygon missing rings: " + p.name);
        for (const auto& ring : pj.at("rings")) {
            std::vector<Eigen::Vector2d> r;
            for (const auto& pt : ring) {
                require(pt.is_array() && pt.size() == 2, "MalformedGeometry",
                        "ring point must be [x,y]");
                r.emplace_back(pt[0].get<double>(), pt[1].get<double>());
            }
            if (r.size() >= 2 && (r.front() - r.back()).norm() < 1e-12)
                r.pop_back();   // drop explicit closing vertex
            p.rings.push_back(std::move(r));
        }
        p.validate();
        out.push_back(std::move(p));
    }
    return out;
}

inline nlohmann::json polygons_to_json(const std::vector<Polygon>& polys) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : polys) {
        nlohmann::json pj;
        pj["name"] = p.name;
        nlohmann::json rings = nlohmann::json::array();
        for (const auto& ring : p.rings) {
            nlohmann::json rj = nlohmann::json::array();
            for (const auto& pt : ring) rj.push_back({pt.x(), pt.y()});
            rings.push_back(rj);
        }
        pj["rings"] = rings;
        j.push_back(pj);
    }
    return j;
}

inline std::vector<Polygon> read_polygons_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "FileNotFound", "cannot open " + path);
    nlohmann::json j;
    in >> j;
    return polygons_from_json(j);
}

inline void write_polygons_file(const std::string& path,
                                const std::vector<Polygon>& polys) {
    std::ofstream out(path);
    require(out.good(), "FileNotWritable", "cannot write " + path);
    out << polygons_to_json(polys).dump(1) << '\n';
}

} // namespace costa

#endif
