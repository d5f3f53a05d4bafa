#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "splatpatch/error.hpp"
#include "splatpatch/parallel.hpp"

namespace splatpatch {

using Vec3d = Eigen::Vector3d;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

/// Colored point set. Positions are world units, colors rgb in [0,1].
struct PointCloud {
  std::vector<Vec3d> positions;
  std::vector<Vec3d> colors;
  std::optional<std::vector<Vec3d>> normals;

  std::size_t size() const { return positions.size(); }
  bool has_normals() const { return normals.has_value(); }

  /// Throws if the type invariants do not hold.
  void validate() const {
    require(!positions.empty(), ErrorKind::EmptyInput, "point cloud has no points");
    require(colors.size() == positions.size(), ErrorKind::ShapeError,
            "point cloud has " + std::to_string(positions.size()) + " positions but " +
                std::to_string(colors.size()) + " colors");
    for (std::size_t i = 0; i < colors.size(); ++i) {
      const Vec3d& c = colors[i];
      require(c.allFinite() && c.minCoeff() >= 0.0 && c.maxCoeff() <= 1.0,
              ErrorKind::InvalidArgument, "color of point " + std::to_string(i) + " outside [0,1]");
      require(positions[i].allFinite(), ErrorKind::NonFiniteInput,
              "position of point " + std::to_string(i) + " is not finite");
    }
    if (normals) {
      require(normals->size() == positions.size(), ErrorKind::ShapeError,
              "normal count does not match point count");
      for (std::size_t i = 0; i < normals->size(); ++i)
        require(std::abs((*normals)[i].norm() - 1.0) <= 1e-6, ErrorKind::InvalidArgument,
                "normal of point " + std::to_string(i) + " is not unit length");
    }
  }

  /// Sub-cloud with the given point ids, in order.
  PointCloud subset(const std::vector<std::uint32_t>& ids) const {
    PointCloud out;
    out.positions.reserve(ids.size());
    out.colors.reserve(ids.size());
    if (normals) out.normals.emplace().reserve(ids.size());
    for (auto id : ids) {
      out.positions.push_back(positions[id]);
      out.colors.push_back(colors[id]);
      if (normals) out.normals->push_back((*normals)[id]);
    }
    return out;
  }
};

/// Maps world positions into [-1,1] by bounding-box center and half-extent.
struct NormalizationTransform {
  Vec3d center = Vec3d::Zero();
  double scale = 1.0;

  Vec3d normalize(const Vec3d& p) const { return (p - center) / scale; }
  Vec3d denormalize(const Vec3d& p) const { return p * scale + center; }
};

/// Result of a k-nearest-neighbor query; distances ascend, ties broken by id.
struct KnnResult {
  std::vector<std::uint32_t> indices;
  std::vector<double> distances;
};

/// Exact k-d tree over a fixed set of positions.
class NeighborIndex {
 public:
  NeighborIndex() = default;

  explicit NeighborIndex(std::vector<Vec3d> points) : points_(std::move(points)) {
    require(!points_.empty(), ErrorKind::EmptyInput, "cannot index an empty point set");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, static_cast<std::uint32_t>(points_.size()));
  }

  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3d>& points() const { return points_; }

  KnnResult k_nearest(const Vec3d& query, std::size_t k) const {
    require(k <= points_.size(), ErrorKind::InsufficientPoints,
            "k=" + std::to_string(k) + " exceeds point count " + std::to_string(points_.size()));
    std::vector<Candidate> heap;
    heap.reserve(k + 1);
    if (k > 0) search(0, query, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    KnnResult out;
    out.indices.reserve(k);
    out.distances.reserve(k);
    for (const auto& c : heap) {
      out.indices.push_back(c.index);
      out.distances.push_back(std::sqrt(c.dist2));
    }
    return out;
  }

 private:
  static constexpr std::uint32_t kLeafSize = 8;

  struct Node {
    std::uint32_t begin, end;
    std::int32_t left = -1, right = -1;
    int axis = 0;
    double split = 0.0;
  };

  struct Candidate {
    double dist2;
    std::uint32_t index;
    bool operator<(const Candidate& o) const {
      return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
    }
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeafSize) return id;
    Vec3d lo = Vec3d::Constant(std::numeric_limits<double>::max());
    Vec3d hi = -lo;
    for (auto i = begin; i < end; ++i) {
      lo = lo.cwiseMin(points_[order_[i]]);
      hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    if (hi[axis] == lo[axis]) return id;  // all coincident: keep as leaf
    const auto mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return points_[a][axis] < points_[b][axis] ||
                              (points_[a][axis] == points_[b][axis] && a < b);
                     });
    const double split = points_[order_[mid]][axis];
    const auto left = build(begin, mid);
    const auto right = build(mid, end);
    Node& node = nodes_[id];
    node.axis = axis;
    node.split = split;
    node.left = left;
    node.right = right;
    return id;
  }

  void offer(std::vector<Candidate>& heap, std::size_t k, Candidate c) const {
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(std::int32_t id, const Vec3d& q, std::size_t k, std::vector<Candidate>& heap) const {
    const Node& node = nodes_[id];
    if (node.left < 0) {
      for (auto i = node.begin; i < node.end; ++i) {
        const auto idx = order_[i];
        offer(heap, k, {(points_[idx] - q).squaredNorm(), idx});
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const auto near = diff < 0 ? node.left : node.right;
    const auto far = diff < 0 ? node.right : node.left;
    search(near, q, k, heap);
    // Points equal to the split value may live on either side, so use <=.
    if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, q, k, heap);
  }

  std::vector<Vec3d> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

inline NeighborIndex build_index(const PointCloud& cloud) {
  require(cloud.size() >= 1, ErrorKind::EmptyInput, "cannot index an empty cloud");
  return NeighborIndex(cloud.positions);
}

inline KnnResult k_nearest(const NeighborIndex& index, const Vec3d& query, std::size_t k) {
  return index.k_nearest(query, k);
}

/// Flat table of the k nearest neighbors (self included) of every indexed point.
struct NeighborTable {
  std::size_t k = 0;
  std::vector<std::uint32_t> ids;  // row-major, size() * k

  std::size_t size() const { return k == 0 ? 0 : ids.size() / k; }
  const std::uint32_t* row(std::size_t i) const { return ids.data() + i * k; }
};

inline NeighborTable neighbor_table(const NeighborIndex& index, std::size_t k) {
  NeighborTable table;
  table.k = std::min(k, index.size());
  table.ids.resize(index.size() * table.k);
  parallel_for(static_cast<std::ptrdiff_t>(index.size()), [&](std::ptrdiff_t i) {
    auto r = index.k_nearest(index.points()[i], table.k);
    std::copy(r.indices.begin(), r.indices.end(), table.ids.begin() + i * table.k);
  });
  return table;
}

inline std::pair<PointCloud, NormalizationTransform> normalize_cloud(const PointCloud& cloud) {
  require(cloud.size() >= 1, ErrorKind::EmptyInput, "cannot normalize an empty cloud");
  Vec3d lo = cloud.positions.front(), hi = cloud.positions.front();
  for (const auto& p : cloud.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  NormalizationTransform t;
  t.center = (hi + lo) / 2.0;
  t.scale = (hi - t.center).maxCoeff();
  require(t.scale > 0.0, ErrorKind::DegenerateCloud, "bounding box of the cloud is a single point");
  PointCloud out = cloud;
  for (auto& p : out.positions) p = t.normalize(p);
  return {std::move(out), t};
}

inline PointCloud denormalize_cloud(const PointCloud& cloud, const NormalizationTransform& t) {
  PointCloud out = cloud;
  for (auto& p : out.positions) p = t.denormalize(p);
  return out;
}

/// Distance from every point to its nearest other point. Exact duplicates get
/// the smallest nonzero distance in the cloud so initial scales stay positive.
inline std::vector<double> min_neighbor_distance(const PointCloud& cloud, const NeighborIndex& index) {
  require(cloud.size() >= 2, ErrorKind::InsufficientPoints,
          "nearest-neighbor distance needs at least 2 points");
  require(index.size() == cloud.size(), ErrorKind::InvalidArgument, "index does not match cloud");
  std::vector<double> dist(cloud.size());
  parallel_for(static_cast<std::ptrdiff_t>(cloud.size()), [&](std::ptrdiff_t i) {
    dist[i] = index.k_nearest(cloud.positions[i], 2).distances[1];
  });
  double smallest = std::numeric_limits<double>::infinity();
  for (double d : dist)
    if (d > 0.0) smallest = std::min(smallest, d);
  require(std::isfinite(smallest), ErrorKind::DegenerateCloud, "all points coincide");
  for (double& d : dist)
    if (d <= 0.0) d = smallest;
  return dist;
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric 3x3 matrix.
inline Vec3d smallest_eigenvector(const Eigen::Matrix3d& cov) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  Vec3d n = solver.eigenvectors().col(0);
  const double len = n.norm();
  if (!(len > 0.0) || !n.allFinite()) return Vec3d::UnitZ();
  return n / len;
}

/// PCA plane-fit normals over each point's k-NN neighborhood. Signs are not
/// oriented; splat rendering is symmetric under n -> -n.
inline std::vector<Vec3d> estimate_normals(const PointCloud& cloud, const NeighborIndex& index,
                                           std::size_t k = 16) {
  require(k >= 3, ErrorKind::InvalidArgument, "normal estimation needs k >= 3");
  require(cloud.size() >= k, ErrorKind::InsufficientPoints,
          "normal estimation with k=" + std::to_string(k) + " needs at least k points");
  std::vector<Vec3d> normals(cloud.size());
  parallel_for(static_cast<std::ptrdiff_t>(cloud.size()), [&](std::ptrdiff_t i) {
    auto nn = index.k_nearest(cloud.positions[i], k);
    Vec3d mean = Vec3d::Zero();
    for (auto id : nn.indices) mean += cloud.positions[id];
    mean /= static_cast<double>(k);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (auto id : nn.indices) {
      const Vec3d d = cloud.positions[id] - mean;
      cov += d * d.transpose();
    }
    normals[i] = smallest_eigenvector(cov / static_cast<double>(k));
  });
  return normals;
}

}  // namespace splatpatch
