#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdn/error.hpp"
#include "mdn/types.hpp"

namespace mdn {

using Face = std::array<int, 3>;
using Edge = std::pair<int, int>;

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<Face> faces;

  std::size_t num_vertices() const { return vertices.size(); }
  std::size_t num_faces() const { return faces.size(); }
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty, or one unit normal per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }
};

// Symmetric neighbor lists, sorted and deduplicated, without self-loops.
class SparseAdjacency {
 public:
  SparseAdjacency() = default;

  SparseAdjacency(std::size_t num_nodes, std::span<const Edge> edges)
      : neighbors_(num_nodes) {
    for (const auto& [a, b] : edges) {
      MDN_CHECK(a >= 0 && b >= 0 && static_cast<std::size_t>(a) < num_nodes &&
                    static_cast<std::size_t>(b) < num_nodes,
                ErrorCode::kInvalidArgument, "adjacency edge index out of range");
      if (a == b) continue;
      neighbors_[a].push_back(b);
      neighbors_[b].push_back(a);
    }
    for (auto& list : neighbors_) {
      std::sort(list.begin(), list.end());
      list.erase(std::unique(list.begin(), list.end()), list.end());
    }
  }

  std::size_t num_nodes() const { return neighbors_.size(); }
  const std::vector<int>& neighbors(std::size_t i) const { return neighbors_[i]; }

  std::size_t num_edges() const {
    std::size_t twice = 0;
    for (const auto& list : neighbors_) twice += list.size();
    return twice / 2;
  }

  // Disjoint union of `copies` copies of this graph; copy k occupies node
  // indices [k*n, (k+1)*n).
  SparseAdjacency replicated(std::size_t copies) const {
    SparseAdjacency out;
    const std::size_t n = num_nodes();
    out.neighbors_.resize(n * copies);
    for (std::size_t k = 0; k < copies; ++k) {
      for (std::size_t i = 0; i < n; ++i) {
        auto& dst = out.neighbors_[k * n + i];
        dst.reserve(neighbors_[i].size());
        for (int j : neighbors_[i]) dst.push_back(static_cast<int>(k * n) + j);
      }
    }
    return out;
  }

 private:
  std::vector<std::vector<int>> neighbors_;
};

// ---------------------------------------------------------------------------
// Mesh queries

inline void validate_mesh(const TriangleMesh& mesh) {
  const auto n = static_cast<int>(mesh.vertices.size());
  for (const auto& f : mesh.faces) {
    for (int idx : f) {
      MDN_CHECK(idx >= 0 && idx < n, ErrorCode::kInvalidArgument,
                "face index " + std::to_string(idx) + " out of range for " +
                    std::to_string(n) + " vertices");
    }
    MDN_CHECK(f[0] != f[1] && f[1] != f[2] && f[0] != f[2], ErrorCode::kInvalidArgument,
              "face references the same vertex twice");
  }
}

// Checks the size floor required of meshes that enter refinement.
inline void validate_refinable(const TriangleMesh& mesh) {
  validate_mesh(mesh);
  MDN_CHECK(mesh.vertices.size() >= 4 && mesh.faces.size() >= 4,
            ErrorCode::kInvalidArgument, "mesh needs at least 4 vertices and 4 faces");
}

/// Unique undirected edges (a < b), sorted lexicographically.
inline std::vector<Edge> mesh_edges(const TriangleMesh& mesh) {
  std::vector<Edge> edges;
  edges.reserve(mesh.faces.size() * 3);
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      edges.emplace_back(a, b);
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

inline SparseAdjacency mesh_adjacency(const TriangleMesh& mesh) {
  const auto edges = mesh_edges(mesh);
  return SparseAdjacency(mesh.vertices.size(), edges);
}

/// Edges not bordered by exactly two faces. Empty for a watertight mesh.
inline std::vector<Edge> open_edges(const TriangleMesh& mesh) {
  std::map<Edge, int> uses;
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      if (a > b) std::swap(a, b);
      ++uses[{a, b}];
    }
  }
  std::vector<Edge> open;
  for (const auto& [e, count] : uses) {
    if (count != 2) open.push_back(e);
  }
  return open;
}

inline Vec3 face_cross(const TriangleMesh& mesh, const Face& f) {
  const Vec3& a = mesh.vertices[f[0]];
  return (mesh.vertices[f[1]] - a).cross(mesh.vertices[f[2]] - a);
}

inline double face_area(const TriangleMesh& mesh, const Face& f) {
  return 0.5 * face_cross(mesh, f).norm();
}

inline Vec3 face_normal(const TriangleMesh& mesh, const Face& f) {
  const Vec3 c = face_cross(mesh, f);
  const double len = c.norm();
  return len > 0.0 ? Vec3(c / len) : Vec3::Zero();
}

inline double surface_area(const TriangleMesh& mesh) {
  double total = 0.0;
  for (const auto& f : mesh.faces) total += face_area(mesh, f);
  return total;
}

// Signed enclosed volume; positive for outward-oriented closed meshes.
inline double signed_volume(const TriangleMesh& mesh) {
  double v = 0.0;
  for (const auto& f : mesh.faces) {
    v += mesh.vertices[f[0]].dot(mesh.vertices[f[1]].cross(mesh.vertices[f[2]]));
  }
  return v / 6.0;
}

inline Mat vertex_matrix(const TriangleMesh& mesh) {
  Mat m(mesh.vertices.size(), 3);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) m.row(i) = mesh.vertices[i].transpose();
  return m;
}

inline TriangleMesh with_vertices(const TriangleMesh& topology, const Mat& positions) {
  MDN_CHECK(positions.rows() == static_cast<Eigen::Index>(topology.vertices.size()) &&
                positions.cols() == 3,
            ErrorCode::kInvalidArgument, "vertex matrix does not match mesh");
  TriangleMesh out;
  out.faces = topology.faces;
  out.vertices.resize(topology.vertices.size());
  for (std::size_t i = 0; i < out.vertices.size(); ++i) out.vertices[i] = positions.row(i).transpose();
  return out;
}

inline std::pair<Vec3, Vec3> bounding_box(std::span<const Vec3> points) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  return {lo, hi};
}

// ---------------------------------------------------------------------------
// Icosahedra

namespace detail {

inline TriangleMesh base_icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  TriangleMesh m;
  m.vertices = {{-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
                {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
                {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : m.vertices) v.normalize();
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return m;
}

// One 1-to-4 split; midpoints are pushed back onto the unit sphere.
inline TriangleMesh subdivide_on_sphere(const TriangleMesh& in) {
  TriangleMesh out;
  out.vertices = in.vertices;
  std::map<Edge, int> midpoint;
  auto mid = [&](int a, int b) {
    const Edge key{std::min(a, b), std::max(a, b)};
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    const Vec3 p = (in.vertices[a] + in.vertices[b]).normalized();
    out.vertices.push_back(p);
    const int idx = static_cast<int>(out.vertices.size()) - 1;
    midpoint.emplace(key, idx);
    return idx;
  };
  out.faces.reserve(in.faces.size() * 4);
  for (const auto& f : in.faces) {
    const int ab = mid(f[0], f[1]);
    const int bc = mid(f[1], f[2]);
    const int ca = mid(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

}  // namespace detail

/// Unit-radius icosphere after `levels` sphere-projected subdivisions.
inline TriangleMesh icosphere(int levels) {
  MDN_CHECK(levels >= 0 && levels <= 6, ErrorCode::kInvalidArgument,
            "icosphere level must be in [0, 6]");
  TriangleMesh m = detail::base_icosahedron();
  for (int i = 0; i < levels; ++i) m = detail::subdivide_on_sphere(m);
  return m;
}

/// Level-0 (12 vertices) or level-1 (42 vertices) icosahedron on the unit sphere.
inline TriangleMesh unit_icosahedron(int level) {
  MDN_CHECK(level == 0 || level == 1, ErrorCode::kInvalidArgument,
            "unit_icosahedron supports level 0 or 1, got " + std::to_string(level));
  return icosphere(level);
}

/// Fan-triangulated regular dodecahedron on the unit sphere: 20 vertices,
/// 36 faces, outward winding.
inline TriangleMesh triangulated_dodecahedron() {
  const TriangleMesh ico = icosphere(0);
  TriangleMesh m;
  for (const auto& f : ico.faces) {
    m.vertices.push_back((ico.vertices[f[0]] + ico.vertices[f[1]] + ico.vertices[f[2]]).normalized());
  }
  for (std::size_t v = 0; v < ico.vertices.size(); ++v) {
    const Vec3 axis = ico.vertices[v];
    const Vec3 e1 = axis.unitOrthogonal();
    const Vec3 e2 = axis.cross(e1);
    std::vector<std::pair<double, int>> ring;
    for (std::size_t f = 0; f < ico.faces.size(); ++f) {
      const auto& face = ico.faces[f];
      if (face[0] != static_cast<int>(v) && face[1] != static_cast<int>(v) && face[2] != static_cast<int>(v)) continue;
      const Vec3& c = m.vertices[f];
      ring.emplace_back(std::atan2(c.dot(e2), c.dot(e1)), static_cast<int>(f));
    }
    std::sort(ring.begin(), ring.end());
    for (std::size_t i = 1; i + 1 < ring.size(); ++i) {
      Face t{ring[0].second, ring[i].second, ring[i + 1].second};
      const Vec3 n = (m.vertices[t[1]] - m.vertices[t[0]]).cross(m.vertices[t[2]] - m.vertices[t[0]]);
      if (n.dot(axis) < 0.0) std::swap(t[1], t[2]);
      m.faces.push_back(t);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Deformation hypotheses

inline constexpr int kHypothesisNodes = 43;
inline constexpr int kHypothesisEdges = 162;

struct HypothesisGraph {
  std::vector<Vec3> nodes;  // nodes[0] is the center vertex
  std::vector<Edge> edges;
  int center_index = 0;
  double scale = 0.0;
};

namespace detail {

struct HypothesisTemplate {
  std::vector<Vec3> offsets;  // 42 unit directions
  std::vector<Edge> edges;    // 162 edges over 43 nodes
  SparseAdjacency adjacency;
};

inline const HypothesisTemplate& hypothesis_template() {
  static const HypothesisTemplate tmpl = [] {
    HypothesisTemplate t;
    const TriangleMesh ico = unit_icosahedron(1);
    t.offsets = ico.vertices;
    for (const auto& [a, b] : mesh_edges(ico)) t.edges.emplace_back(a + 1, b + 1);
    for (int i = 1; i < kHypothesisNodes; ++i) t.edges.emplace_back(0, i);
    t.adjacency = SparseAdjacency(kHypothesisNodes, t.edges);
    return t;
  }();
  return tmpl;
}

}  // namespace detail

/// The 42 unit offsets used for hypotheses, in node order 1..42.
inline const std::vector<Vec3>& hypothesis_offsets() {
  return detail::hypothesis_template().offsets;
}

inline const SparseAdjacency& hypothesis_adjacency() {
  return detail::hypothesis_template().adjacency;
}

inline HypothesisGraph build_hypothesis_graph(const Vec3& center, double scale) {
  MDN_CHECK(center.allFinite(), ErrorCode::kInvalidArgument, "non-finite hypothesis center");
  MDN_CHECK(scale > 0.0 && std::isfinite(scale), ErrorCode::kInvalidArgument,
            "hypothesis scale must be positive");
  const auto& tmpl = detail::hypothesis_template();
  HypothesisGraph g;
  g.scale = scale;
  g.nodes.reserve(kHypothesisNodes);
  g.nodes.push_back(center);
  for (const auto& u : tmpl.offsets) g.nodes.push_back(center + scale * u);
  g.edges = tmpl.edges;
  return g;
}

// ---------------------------------------------------------------------------
// Surface sampling

/// Uniform point in triangle (v1, v2, v3) from two variates in [0, 1].
inline Vec3 sample_triangle(const Vec3& v1, const Vec3& v2, const Vec3& v3, double r1, double r2) {
  MDN_CHECK(r1 >= 0.0 && r1 <= 1.0 && r2 >= 0.0 && r2 <= 1.0, ErrorCode::kInvalidArgument,
            "triangle variates must lie in [0, 1]");
  const double s = std::sqrt(r1);
  return (1.0 - s) * v1 + (1.0 - r2) * s * v2 + s * r2 * v3;
}

// Barycentric weights matching sample_triangle.
inline std::array<double, 3> triangle_weights(double r1, double r2) {
  const double s = std::sqrt(r1);
  return {1.0 - s, (1.0 - r2) * s, s * r2};
}

// Which face each sample lands on and where. Kept separate from the point
// positions so differentiable losses can replay the same draw.
struct SurfaceSamplePlan {
  std::vector<int> face;
  std::vector<std::array<double, 3>> weights;

  std::size_t size() const { return face.size(); }
};

inline SurfaceSamplePlan plan_surface_samples(const TriangleMesh& mesh, std::size_t n,
                                              std::uint64_t seed) {
  MDN_CHECK(n > 0, ErrorCode::kInvalidArgument, "sample count must be positive");
  std::vector<double> cumulative(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    total += face_area(mesh, mesh.faces[f]);
    cumulative[f] = total;
  }
  MDN_CHECK(total > 0.0 && std::isfinite(total), ErrorCode::kDegenerateMesh,
            "mesh has zero total surface area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SurfaceSamplePlan plan;
  plan.face.resize(n);
  plan.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    if (it == cumulative.end()) --it;
    plan.face[i] = static_cast<int>(it - cumulative.begin());
    const double r1 = unit(rng);
    const double r2 = unit(rng);
    plan.weights[i] = triangle_weights(r1, r2);
  }
  return plan;
}

inline PointCloud apply_sample_plan(const TriangleMesh& mesh, const SurfaceSamplePlan& plan) {
  PointCloud cloud;
  cloud.points.resize(plan.size());
  cloud.normals.resize(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const Face& f = mesh.faces[plan.face[i]];
    const auto& w = plan.weights[i];
    cloud.points[i] = w[0] * mesh.vertices[f[0]] + w[1] * mesh.vertices[f[1]] +
                      w[2] * mesh.vertices[f[2]];
    cloud.normals[i] = face_normal(mesh, f);
  }
  return cloud;
}

/// Area-weighted uniform surface samples with flat face normals.
inline PointCloud sample_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  return apply_sample_plan(mesh, plan_surface_samples(mesh, n, seed));
}

// ---------------------------------------------------------------------------
// Laplacian coordinates

inline std::vector<Vec3> laplacian_coordinates(const TriangleMesh& mesh) {
  const SparseAdjacency adj = mesh_adjacency(mesh);
  std::vector<Vec3> delta(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& nb = adj.neighbors(i);
    MDN_CHECK(!nb.empty(), ErrorCode::kDegenerateMesh,
              "vertex " + std::to_string(i) + " has no neighbors");
    Vec3 mean = Vec3::Zero();
    for (int j : nb) mean += mesh.vertices[j];
    delta[i] = mesh.vertices[i] - mean / static_cast<double>(nb.size());
  }
  return delta;
}

}  // namespace mdn
