#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "mdn/autodiff.hpp"
#include "mdn/error.hpp"
#include "mdn/geometry.hpp"
#include "mdn/parallel.hpp"
#include "mdn/types.hpp"

namespace mdn {

struct LossWeights {
  double chamfer = 1.0;
  double normal = 1.6e-4;
  double edge = 0.1;
  double laplacian = 0.5;
};

inline void validate(const LossWeights& w) {
  for (double x : {w.chamfer, w.normal, w.edge, w.laplacian}) {
    MDN_CHECK(std::isfinite(x) && x >= 0.0, ErrorCode::kInvalidArgument,
              "loss weights must be finite and non-negative");
  }
}

struct LossBreakdown {
  double chamfer = 0.0;
  double normal = 0.0;
  double edge = 0.0;
  double laplacian = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    chamfer += o.chamfer;
    normal += o.normal;
    edge += o.edge;
    laplacian += o.laplacian;
    total += o.total;
    return *this;
  }
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return w.chamfer * b.chamfer + w.normal * b.normal + w.edge * b.edge + w.laplacian * b.laplacian;
}

// Connectivity shared by every loss on one mesh topology.
struct MeshTopology {
  std::vector<Face> faces;
  std::vector<Edge> edges;
  std::shared_ptr<const SparseAdjacency> adjacency;
  std::size_t num_vertices = 0;

  explicit MeshTopology(const TriangleMesh& mesh)
      : faces(mesh.faces),
        edges(mesh_edges(mesh)),
        adjacency(std::make_shared<const SparseAdjacency>(mesh.vertices.size(), edges)),
        num_vertices(mesh.vertices.size()) {}
};

inline Mat cloud_matrix(const std::vector<Vec3>& pts) {
  Mat m(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) m.row(i) = pts[i].transpose();
  return m;
}

// ---------------------------------------------------------------------------
// Nearest neighbors

struct NearestResult {
  std::vector<int> index;
  std::vector<double> sq_dist;
};

/// Exact nearest neighbor in `dst` for every row of `src` (both N x 3).
/// Ties resolve to the lowest index. Candidates are visited outward from the
/// query along x-sorted order and the sweep stops once dx^2 exceeds the best.
inline NearestResult nearest_neighbors(const Mat& src, const Mat& dst) {
  MDN_CHECK(src.rows() > 0 && dst.rows() > 0, ErrorCode::kInvalidArgument,
            "nearest neighbor search needs non-empty clouds");
  const Eigen::Index m = dst.rows();
  std::vector<int> order(m);
  for (Eigen::Index j = 0; j < m; ++j) order[j] = static_cast<int>(j);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return dst(a, 0) < dst(b, 0) || (dst(a, 0) == dst(b, 0) && a < b);
  });
  std::vector<double> sx(m), sy(m), sz(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    sx[k] = dst(order[k], 0);
    sy[k] = dst(order[k], 1);
    sz[k] = dst(order[k], 2);
  }

  NearestResult r;
  r.index.resize(src.rows());
  r.sq_dist.resize(src.rows());
  parallel_for(0, static_cast<std::size_t>(src.rows()), [&](std::size_t i) {
    const double px = src(i, 0), py = src(i, 1), pz = src(i, 2);
    double best = std::numeric_limits<double>::infinity();
    int arg = std::numeric_limits<int>::max();
    auto visit = [&](Eigen::Index k) {
      const double dx = px - sx[k];
      const double dy = py - sy[k];
      const double dz = pz - sz[k];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best || (d == best && order[k] < arg)) {
        best = d;
        arg = order[k];
      }
    };
    const Eigen::Index mid = std::lower_bound(sx.begin(), sx.end(), px) - sx.begin();
    Eigen::Index hi = mid, lo = mid - 1;
    bool go_hi = true, go_lo = true;
    while (go_hi || go_lo) {
      if (go_hi) {
        if (hi >= m) {
          go_hi = false;
        } else {
          const double dx = sx[hi] - px;
          if (dx * dx > best) {
            go_hi = false;
          } else {
            visit(hi++);
          }
        }
      }
      if (go_lo) {
        if (lo < 0) {
          go_lo = false;
        } else {
          const double dx = px - sx[lo];
          if (dx * dx > best) {
            go_lo = false;
          } else {
            visit(lo--);
          }
        }
      }
    }
    r.index[i] = arg;
    r.sq_dist[i] = best;
  });
  return r;
}

// ---------------------------------------------------------------------------
// Chamfer

/// Symmetric mean-squared Chamfer distance between two point sets.
inline ad::Var chamfer(const ad::Var& p, const ad::Var& q) {
  MDN_CHECK(p.rows() > 0 && q.rows() > 0, ErrorCode::kInvalidArgument, "chamfer needs non-empty clouds");
  MDN_CHECK(p.cols() == 3 && q.cols() == 3, ErrorCode::kInvalidArgument, "chamfer expects N x 3 clouds");
  auto pq = std::make_shared<NearestResult>(nearest_neighbors(p.value(), q.value()));
  auto qp = std::make_shared<NearestResult>(nearest_neighbors(q.value(), p.value()));
  double sp = 0.0, sq = 0.0;
  for (double d : pq->sq_dist) sp += d;
  for (double d : qp->sq_dist) sq += d;
  Mat out(1, 1);
  out(0, 0) = sp / static_cast<double>(p.rows()) + sq / static_cast<double>(q.rows());
  return p.tape()->record(std::move(out), {p, q}, [p, q, pq, qp](ad::Tape& t, const Mat& g) {
    const double s = g(0, 0);
    const double wp = 2.0 * s / static_cast<double>(p.rows());
    const double wq = 2.0 * s / static_cast<double>(q.rows());
    const Mat& P = p.value();
    const Mat& Q = q.value();
    Mat gp = Mat::Zero(P.rows(), 3);
    Mat gq = Mat::Zero(Q.rows(), 3);
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      const auto j = pq->index[i];
      const auto d = (P.row(i) - Q.row(j)).eval();
      gp.row(i) += wp * d;
      gq.row(j) -= wp * d;
    }
    for (Eigen::Index j = 0; j < Q.rows(); ++j) {
      const auto i = qp->index[j];
      const auto d = (Q.row(j) - P.row(i)).eval();
      gq.row(j) += wq * d;
      gp.row(i) -= wq * d;
    }
    t.accumulate(p, gp);
    t.accumulate(q, gq);
  });
}

inline double chamfer(const PointCloud& p, const PointCloud& q) {
  MDN_CHECK(!p.empty() && !q.empty(), ErrorCode::kInvalidArgument, "chamfer needs non-empty clouds");
  ad::Tape tape;
  return chamfer(tape.constant(cloud_matrix(p.points)), tape.constant(cloud_matrix(q.points))).value()(0, 0);
}

/// Points placed on the mesh by `plan`, as a differentiable function of the
/// vertex positions (face choice and barycentric weights held fixed).
inline ad::Var surface_points(const ad::Var& vertices, const std::vector<Face>& faces,
                              const SurfaceSamplePlan& plan) {
  const Mat& V = vertices.value();
  Mat out(plan.size(), 3);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const Face& f = faces[plan.face[i]];
    const auto& w = plan.weights[i];
    out.row(i) = w[0] * V.row(f[0]) + w[1] * V.row(f[1]) + w[2] * V.row(f[2]);
  }
  auto shared_plan = std::make_shared<SurfaceSamplePlan>(plan);
  auto shared_faces = std::make_shared<std::vector<Face>>(faces);
  return vertices.tape()->record(std::move(out), {vertices},
                                 [vertices, shared_plan, shared_faces](ad::Tape& t, const Mat& g) {
    t.accumulate_with(vertices, [&](Mat& gv) {
      for (std::size_t i = 0; i < shared_plan->size(); ++i) {
        const Face& f = (*shared_faces)[shared_plan->face[i]];
        const auto& w = shared_plan->weights[i];
        for (int k = 0; k < 3; ++k) gv.row(f[k]) += w[k] * g.row(i);
      }
    });
  });
}

/// Chamfer between (vertices + `extra` area-uniform surface samples) and gt.
inline ad::Var resampled_chamfer(const ad::Var& vertices, const MeshTopology& topo,
                                 const ad::Var& gt, std::size_t extra, std::uint64_t seed) {
  if (extra == 0) return chamfer(vertices, gt);
  TriangleMesh current;
  current.faces = topo.faces;
  current.vertices.resize(vertices.rows());
  for (Eigen::Index i = 0; i < vertices.rows(); ++i) current.vertices[i] = vertices.value().row(i).transpose();
  const SurfaceSamplePlan plan = plan_surface_samples(current, extra, seed);
  const ad::Var cloud = ad::concat_rows(vertices, surface_points(vertices, topo.faces, plan));
  return chamfer(cloud, gt);
}

inline double resampled_chamfer(const TriangleMesh& pred, const PointCloud& gt, std::size_t extra,
                                std::uint64_t seed) {
  MDN_CHECK(!gt.empty(), ErrorCode::kInvalidArgument, "ground-truth cloud is empty");
  ad::Tape tape;
  const MeshTopology topo(pred);
  return resampled_chamfer(tape.constant(vertex_matrix(pred)), topo, tape.constant(cloud_matrix(gt.points)),
                           extra, seed)
      .value()(0, 0);
}

// ---------------------------------------------------------------------------
// Normal consistency

/// Mean over directed mesh edges (p, k) of <normalize(p - k), n_q>^2 where
/// n_q is the normal of the gt point nearest to p.
inline ad::Var normal_loss(const ad::Var& vertices, const MeshTopology& topo, const PointCloud& gt) {
  MDN_CHECK(gt.has_normals() && gt.normals.size() == gt.points.size(), ErrorCode::kInvalidArgument,
            "normal loss needs ground-truth normals");
  MDN_CHECK(!topo.edges.empty(), ErrorCode::kInvalidArgument, "normal loss needs mesh edges");
  const Mat& V = vertices.value();
  const NearestResult nn = nearest_neighbors(V, cloud_matrix(gt.points));
  // Directed edges: both orientations of every unique edge.
  struct Term {
    int p, k;
    Vec3 n;
  };
  auto terms = std::make_shared<std::vector<Term>>();
  terms->reserve(topo.edges.size() * 2);
  for (const auto& [a, b] : topo.edges) {
    terms->push_back({a, b, gt.normals[nn.index[a]]});
    terms->push_back({b, a, gt.normals[nn.index[b]]});
  }
  double total = 0.0;
  for (const auto& term : *terms) {
    const Vec3 e = (V.row(term.p) - V.row(term.k)).transpose();
    const double len = e.norm();
    if (len <= 0.0) continue;
    const double c = e.dot(term.n) / len;
    total += c * c;
  }
  Mat out(1, 1);
  out(0, 0) = total / static_cast<double>(terms->size());
  return vertices.tape()->record(std::move(out), {vertices}, [vertices, terms](ad::Tape& t, const Mat& g) {
    const double w = g(0, 0) / static_cast<double>(terms->size());
    const Mat& V = vertices.value();
    t.accumulate_with(vertices, [&](Mat& gv) {
      for (const auto& term : *terms) {
        const Vec3 e = (V.row(term.p) - V.row(term.k)).transpose();
        const double len = e.norm();
        if (len <= 0.0) continue;
        const Vec3 u = e / len;
        const double c = u.dot(term.n);
        const Vec3 de = 2.0 * c * (term.n - u * c) / len;
        gv.row(term.p) += w * de.transpose();
        gv.row(term.k) -= w * de.transpose();
      }
    });
  });
}

inline double normal_loss(const TriangleMesh& pred, const PointCloud& gt) {
  ad::Tape tape;
  return normal_loss(tape.constant(vertex_matrix(pred)), MeshTopology(pred), gt).value()(0, 0);
}

// ---------------------------------------------------------------------------
// Edge length

/// Mean squared length over unique edges.
inline ad::Var edge_loss(const ad::Var& vertices, const MeshTopology& topo) {
  if (topo.edges.empty()) return vertices.tape()->constant(Mat::Zero(1, 1));
  const Mat& V = vertices.value();
  double total = 0.0;
  for (const auto& [a, b] : topo.edges) total += (V.row(a) - V.row(b)).squaredNorm();
  Mat out(1, 1);
  out(0, 0) = total / static_cast<double>(topo.edges.size());
  auto edges = std::make_shared<std::vector<Edge>>(topo.edges);
  return vertices.tape()->record(std::move(out), {vertices}, [vertices, edges](ad::Tape& t, const Mat& g) {
    const double w = 2.0 * g(0, 0) / static_cast<double>(edges->size());
    const Mat& V = vertices.value();
    t.accumulate_with(vertices, [&](Mat& gv) {
      for (const auto& [a, b] : *edges) {
        const auto d = (V.row(a) - V.row(b)).eval();
        gv.row(a) += w * d;
        gv.row(b) -= w * d;
      }
    });
  });
}

inline double edge_loss(const TriangleMesh& pred) {
  ad::Tape tape;
  return edge_loss(tape.constant(vertex_matrix(pred)), MeshTopology(pred)).value()(0, 0);
}

// ---------------------------------------------------------------------------
// Laplacian

namespace detail {

// delta_i = x_i - mean_{j in N(i)} x_j
inline Mat apply_laplacian(const SparseAdjacency& adj, const Mat& x) {
  Mat out = x;
  for (std::size_t i = 0; i < adj.num_nodes(); ++i) {
    const auto& nb = adj.neighbors(i);
    MDN_CHECK(!nb.empty(), ErrorCode::kDegenerateMesh, "vertex " + std::to_string(i) + " has no neighbors");
    const double w = 1.0 / static_cast<double>(nb.size());
    for (int j : nb) out.row(i) -= w * x.row(j);
  }
  return out;
}

inline Mat apply_laplacian_transpose(const SparseAdjacency& adj, const Mat& r) {
  Mat out = r;
  for (std::size_t i = 0; i < adj.num_nodes(); ++i) {
    const auto& nb = adj.neighbors(i);
    const double w = 1.0 / static_cast<double>(nb.size());
    for (int j : nb) out.row(j) -= w * r.row(i);
  }
  return out;
}

}  // namespace detail

/// Mean over vertices of |delta_i(after) - delta_i(before)|^2.
inline ad::Var laplacian_loss(const ad::Var& before, const ad::Var& after, const MeshTopology& topo) {
  MDN_CHECK(before.rows() == after.rows() && before.cols() == 3 && after.cols() == 3 &&
                static_cast<std::size_t>(after.rows()) == topo.num_vertices,
            ErrorCode::kInvalidArgument, "laplacian loss: topology mismatch");
  const auto adj = topo.adjacency;
  const Mat diff = detail::apply_laplacian(*adj, after.value() - before.value());
  Mat out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<double>(diff.rows());
  return after.tape()->record(std::move(out), {before, after}, [before, after, adj, diff](ad::Tape& t, const Mat& g) {
    const Mat gd = detail::apply_laplacian_transpose(*adj, (2.0 * g(0, 0) / static_cast<double>(diff.rows())) * diff);
    if (after.requires_grad()) t.accumulate(after, gd);
    if (before.requires_grad()) t.accumulate(before, -gd);
  });
}

inline double laplacian_loss(const TriangleMesh& before, const TriangleMesh& after) {
  MDN_CHECK(before.vertices.size() == after.vertices.size() && before.faces == after.faces,
            ErrorCode::kInvalidArgument, "laplacian loss needs identical topology");
  ad::Tape tape;
  const MeshTopology topo(after);
  return laplacian_loss(tape.constant(vertex_matrix(before)), tape.constant(vertex_matrix(after)), topo)
      .value()(0, 0);
}

// ---------------------------------------------------------------------------
// Overall objective

struct LossOptions {
  LossWeights weights;
  std::size_t extra_samples = 4000;  // surface samples added to the vertices
};

struct TotalLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

/// lambda1 chamfer + lambda2 normal + lambda3 edge + lambda4 laplacian, with
/// the Laplacian term measured against `before`.
inline TotalLoss total_loss(const ad::Var& pred, const ad::Var& before, const MeshTopology& topo,
                            const PointCloud& gt, const ad::Var& gt_points, const LossOptions& opt,
                            std::uint64_t seed) {
  validate(opt.weights);
  const ad::Var lc = resampled_chamfer(pred, topo, gt_points, opt.extra_samples, seed);
  const ad::Var ln = normal_loss(pred, topo, gt);
  const ad::Var le = edge_loss(pred, topo);
  const ad::Var ll = laplacian_loss(before, pred, topo);
  const auto& w = opt.weights;
  TotalLoss out;
  out.total = ad::weighted_sum({lc, ln, le, ll}, {w.chamfer, w.normal, w.edge, w.laplacian});
  out.breakdown.chamfer = lc.value()(0, 0);
  out.breakdown.normal = ln.value()(0, 0);
  out.breakdown.edge = le.value()(0, 0);
  out.breakdown.laplacian = ll.value()(0, 0);
  out.breakdown.total = out.total.value()(0, 0);
  return out;
}

inline LossBreakdown total_loss(const TriangleMesh& pred, const TriangleMesh& before, const PointCloud& gt,
                                const LossOptions& opt, std::uint64_t seed) {
  MDN_CHECK(before.vertices.size() == pred.vertices.size() && before.faces == pred.faces,
            ErrorCode::kInvalidArgument, "total loss needs identical topology");
  ad::Tape tape;
  const MeshTopology topo(pred);
  return total_loss(tape.constant(vertex_matrix(pred)), tape.constant(vertex_matrix(before)), topo, gt,
                    tape.constant(cloud_matrix(gt.points)), opt, seed)
      .breakdown;
}

}  // namespace mdn
