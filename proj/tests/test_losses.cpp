#include "test_support.hpp"

namespace mdn {
namespace {

using test::brute_chamfer;
using test::brute_nearest_sq;

PointCloud cloud(std::initializer_list<Vec3> pts) {
  PointCloud c;
  c.points = pts;
  return c;
}

TriangleMesh noisy_sphere(std::uint64_t seed, int level = 1, double noise = 0.03) {
  TriangleMesh m = icosphere(level);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, noise);
  for (auto& v : m.vertices) v = 0.4 * v + Vec3(n(rng), n(rng), n(rng));
  return m;
}

TEST(Chamfer, IdenticalCloudsGiveZero) {
  std::mt19937_64 rng(1);
  const PointCloud p = test::random_cloud(50, rng);
  EXPECT_EQ(chamfer(p, p), 0.0);
}

TEST(Chamfer, SinglePair) {
  EXPECT_EQ(chamfer(cloud({{0, 0, 0}}), cloud({{1, 0, 0}})), 2.0);
}

TEST(Chamfer, MatchesBruteForceAndIsSymmetric) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> size(1, 256);
  for (int trial = 0; trial < 40; ++trial) {
    const PointCloud p = test::random_cloud(trial == 0 ? 64 : size(rng), rng);
    const PointCloud q = test::random_cloud(trial == 0 ? 64 : size(rng), rng);
    const double c = chamfer(p, q);
    EXPECT_NEAR(c, brute_chamfer(p.points, q.points), 1e-12 * std::max(1.0, c));
    EXPECT_EQ(c, chamfer(q, p));
    EXPECT_GE(c, 0.0);
  }
}

TEST(Chamfer, ZeroForSamePointSetInAnyOrder) {
  std::mt19937_64 rng(3);
  PointCloud p = test::random_cloud(30, rng);
  PointCloud q = p;
  std::shuffle(q.points.begin(), q.points.end(), rng);
  q.points.push_back(q.points[4]);
  EXPECT_EQ(chamfer(p, q), 0.0);
  q.points[0].x() += 1e-3;
  EXPECT_GT(chamfer(p, q), 0.0);
}

TEST(Chamfer, EmptyRejected) {
  EXPECT_MDN_ERROR(chamfer(PointCloud{}, cloud({{0, 0, 0}})), ErrorCode::kInvalidArgument);
}

TEST(ResampledChamfer, NoExtraReducesToVertices) {
  const TriangleMesh m = noisy_sphere(4);
  std::mt19937_64 rng(5);
  const PointCloud gt = test::random_cloud(80, rng, 0.3);
  PointCloud verts;
  verts.points = m.vertices;
  EXPECT_EQ(resampled_chamfer(m, gt, 0, 9), chamfer(verts, gt));
}

TEST(ResampledChamfer, PredictionCloudIsVerticesPlusSamples) {
  const TriangleMesh m = icosphere(3);
  const SurfaceSamplePlan plan = plan_surface_samples(m, 4000, 1);
  ad::Tape t;
  const ad::Var v = t.constant(vertex_matrix(m));
  const ad::Var cloud = ad::concat_rows(v, surface_points(v, m.faces, plan));
  EXPECT_EQ(cloud.rows(), 642 + 4000);
  // The reference template: 2466 vertices and 4000 samples.
  EXPECT_EQ(2466u + plan_surface_samples(m, 4000, 2).size(), 6466u);
}

TEST(ResampledChamfer, MatchesBruteForceOnExplicitCloud) {
  const TriangleMesh m = noisy_sphere(6);
  std::mt19937_64 rng(7);
  const PointCloud gt = test::random_cloud(100, rng, 0.3);
  PointCloud pred;
  pred.points = m.vertices;
  const PointCloud extra = sample_surface(m, 300, 11);
  pred.points.insert(pred.points.end(), extra.points.begin(), extra.points.end());
  EXPECT_NEAR(resampled_chamfer(m, gt, 300, 11), brute_chamfer(pred.points, gt.points), 1e-12);
}

TEST(ResampledChamfer, GradientOnCubeMatchesCentralDifferences) {
  TriangleMesh cube = test::unit_cube();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& v : cube.vertices) v += Vec3(n(rng), n(rng), n(rng));
  const PointCloud gt = sample_surface(test::scaled(test::unit_cube(), 1.1), 200, 3);
  const MeshTopology topo(cube);
  ad::Tape t;
  const ad::Var v = t.parameter(vertex_matrix(cube));
  t.backward(resampled_chamfer(v, topo, t.constant(cloud_matrix(gt.points)), 150, 5));
  const Mat V = vertex_matrix(cube);
  Mat fd(V.rows(), 3);
  const double h = 1e-7;
  for (Eigen::Index i = 0; i < V.size(); ++i) {
    Mat hi = V, lo = V;
    hi.data()[i] += h;
    lo.data()[i] -= h;
    fd.data()[i] = (resampled_chamfer(with_vertices(cube, hi), gt, 150, 5) -
                    resampled_chamfer(with_vertices(cube, lo), gt, 150, 5)) /
                   (2 * h);
  }
  const double rel = (v.grad() - fd).cwiseAbs().maxCoeff() / fd.cwiseAbs().maxCoeff();
  EXPECT_LT(rel, 1e-4);
}

PointCloud square_samples() {
  return sample_surface(test::unit_square(), 500, 2);
}

TEST(NormalLoss, FlatSquareAgainstOwnSamples) {
  EXPECT_NEAR(normal_loss(test::unit_square(), square_samples()), 0.0, 1e-9);
}

TEST(NormalLoss, EdgeAlongNormalContributesOne) {
  // A needle triangle fan standing on z with the gt normal along z.
  TriangleMesh m;
  m.vertices = {{0, 0, 0}, {0, 0, 1}, {1e-9, 1e-9, 0.5}, {0, 0, 2}};
  m.faces = {{0, 1, 2}, {1, 3, 2}};
  PointCloud gt;
  gt.points = {{0, 0, 0}};
  gt.normals = {{0, 0, 1}};
  // Every edge is (anti)parallel to z up to 1e-9.
  EXPECT_NEAR(normal_loss(m, gt), 1.0, 1e-12);
}

TEST(NormalLoss, MatchesDirectedEdgeOracle) {
  const TriangleMesh m = noisy_sphere(9);
  const PointCloud gt = sample_surface(test::scaled(icosphere(2), 0.4), 400, 4);
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& [a, b] : mesh_edges(m)) {
    for (const auto& [p, k] : {std::pair{a, b}, std::pair{b, a}}) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < gt.size(); ++j) {
        if ((gt.points[j] - m.vertices[p]).squaredNorm() < (gt.points[best] - m.vertices[p]).squaredNorm()) best = j;
      }
      const double d = (m.vertices[p] - m.vertices[k]).normalized().dot(gt.normals[best]);
      acc += d * d;
      ++count;
    }
  }
  EXPECT_NEAR(normal_loss(m, gt), acc / count, 1e-12);
}

TEST(NormalLoss, MissingNormalsRejected) {
  PointCloud gt;
  gt.points = {{0, 0, 0}};
  EXPECT_MDN_ERROR(normal_loss(test::unit_square(), gt), ErrorCode::kInvalidArgument);
}

TEST(EdgeLoss, Collocated) {
  TriangleMesh m = test::regular_tetrahedron();
  for (auto& v : m.vertices) v = Vec3(0.3, 0.3, 0.3);
  EXPECT_EQ(edge_loss(m), 0.0);
}

TEST(EdgeLoss, UnitTetrahedron) {
  EXPECT_NEAR(edge_loss(test::scaled(test::regular_tetrahedron(), 1.0 / std::sqrt(8.0))), 1.0, 1e-15);
}

TEST(EdgeLoss, QuadraticHomogeneityAndTranslation) {
  const TriangleMesh m = noisy_sphere(10);
  const double base = edge_loss(m);
  for (double k : {0.5, 2.0, 3.7}) EXPECT_NEAR(edge_loss(test::scaled(m, k)), k * k * base, 1e-12 * k * k);
  EXPECT_NEAR(edge_loss(test::translated(m, Vec3(5, -2, 1))), base, 1e-12);
}

TEST(LaplacianLoss, UnchangedAndTranslated) {
  const TriangleMesh m = noisy_sphere(11);
  EXPECT_EQ(laplacian_loss(m, m), 0.0);
  EXPECT_NEAR(laplacian_loss(m, test::translated(m, Vec3(0.3, -1, 2))), 0.0, 1e-24);
  const TriangleMesh n = noisy_sphere(12);
  EXPECT_NEAR(laplacian_loss(test::translated(m, Vec3(1, 1, 1)), test::translated(n, Vec3(1, 1, 1))),
              laplacian_loss(m, n), 1e-12);
}

TEST(LaplacianLoss, SingleVertexPerturbation) {
  const TriangleMesh before = noisy_sphere(13);
  TriangleMesh after = before;
  const int j = 7;
  const Vec3 d(0.01, -0.02, 0.005);
  after.vertices[j] += d;
  const SparseAdjacency adj = mesh_adjacency(before);
  // delta_j moves by d; each neighbor's delta moves by -d / deg(neighbor).
  double acc = d.squaredNorm();
  for (int i : adj.neighbors(j)) {
    const double deg = static_cast<double>(adj.neighbors(i).size());
    acc += d.squaredNorm() / (deg * deg);
  }
  EXPECT_NEAR(laplacian_loss(before, after), acc / before.vertices.size(), 1e-15);
}

TEST(LaplacianLoss, TopologyMismatchRejected) {
  EXPECT_MDN_ERROR(laplacian_loss(icosphere(0), icosphere(1)), ErrorCode::kInvalidArgument);
  TriangleMesh flipped = icosphere(0);
  std::swap(flipped.faces[0][1], flipped.faces[0][2]);
  EXPECT_MDN_ERROR(laplacian_loss(icosphere(0), flipped), ErrorCode::kInvalidArgument);
}

TEST(TotalLoss, ZeroWeights) {
  const TriangleMesh m = noisy_sphere(14);
  const PointCloud gt = sample_surface(test::scaled(icosphere(2), 0.4), 200, 1);
  LossOptions opt;
  opt.weights = {0, 0, 0, 0};
  opt.extra_samples = 50;
  EXPECT_EQ(total_loss(m, noisy_sphere(15), gt, opt, 1).total, 0.0);
}

TEST(TotalLoss, DefaultWeightsOnUnitComponents) {
  LossBreakdown b{1.0, 1.0, 1.0, 1.0, 0.0};
  EXPECT_NEAR(weighted_total(b, LossWeights{}), 1.60016, 1e-12);
}

TEST(TotalLoss, TotalIsWeightedSumOfTerms) {
  const TriangleMesh before = noisy_sphere(16);
  const TriangleMesh pred = noisy_sphere(17);
  const PointCloud gt = sample_surface(test::scaled(icosphere(2), 0.4), 300, 2);
  LossOptions opt;
  opt.extra_samples = 100;
  const LossBreakdown b = total_loss(pred, before, gt, opt, 3);
  EXPECT_NEAR(b.total, weighted_total(b, opt.weights), 1e-12);
  EXPECT_EQ(b.chamfer, resampled_chamfer(pred, gt, 100, 3));
  EXPECT_EQ(b.normal, normal_loss(pred, gt));
  EXPECT_EQ(b.edge, edge_loss(pred));
  EXPECT_EQ(b.laplacian, laplacian_loss(before, pred));
  for (double x : {b.chamfer, b.normal, b.edge, b.laplacian}) EXPECT_GE(x, 0.0);
}

TEST(TotalLoss, NegativeWeightRejected) {
  LossOptions opt;
  opt.weights.edge = -0.1;
  EXPECT_MDN_ERROR(total_loss(noisy_sphere(1), noisy_sphere(2), sample_surface(icosphere(1), 10, 1), opt, 0),
                   ErrorCode::kInvalidArgument);
}

}  // namespace
}  // namespace mdn
