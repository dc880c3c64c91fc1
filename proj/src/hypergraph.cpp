#include "rehydil/hypergraph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "rehydil/ops.hpp"

namespace rehydil {

namespace {

// Pairwise squared Euclidean distances on detached features, summed in
// channel order so results are reproducible.
std::vector<double> pairwise_sq_distances(const VertexSet& vertices) {
  const std::size_t n = vertices.size(), c = vertices.channels();
  auto f = vertices.features.data();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double diff = f[i * c + k] - f[j * c + k];
        acc += diff * diff;
      }
      d[i * n + j] = acc;
      d[j * n + i] = acc;
    }
  }
  return d;
}

void check_vertex_set(const char* op, const VertexSet& v) {
  if (!v.features.defined() || v.features.rank() != 2 || v.features.dim(0) != v.size()) {
    throw ShapeError(op, "vertex features do not match the recorded grid layout");
  }
}

}  // namespace

GridPosition VertexSet::origin(std::size_t vertex) const {
  const std::size_t hw = height * width;
  return {vertex / hw, (vertex % hw) / width, vertex % width};
}

Hypergraph::Hypergraph(std::size_t num_vertices, std::vector<std::vector<std::size_t>> members)
    : n_(num_vertices), members_(std::move(members)), incidence_(num_vertices * num_vertices, 0),
      vertex_degrees_(num_vertices, 0) {
  if (members_.size() != n_) throw std::invalid_argument("hypergraph: need exactly one edge per vertex");
  for (std::size_t e = 0; e < n_; ++e) {
    auto& m = members_[e];
    std::sort(m.begin(), m.end());
    if (std::adjacent_find(m.begin(), m.end()) != m.end()) throw std::invalid_argument("hypergraph: duplicate member");
    if (!std::binary_search(m.begin(), m.end(), e)) throw std::invalid_argument("hypergraph: edge must contain its own vertex");
    for (std::size_t v : m) {
      if (v >= n_) throw std::invalid_argument("hypergraph: vertex index out of range");
      incidence_[v * n_ + e] = 1;
      ++vertex_degrees_[v];
    }
  }
}

Tensor Hypergraph::incidence_tensor() const {
  std::vector<double> h(incidence_.begin(), incidence_.end());
  return Tensor({n_, n_}, std::move(h));
}

VertexSet flatten_features(const Tensor& feature_map) {
  if (feature_map.rank() != 4) {
    throw ShapeError("flatten_features", "expected B x C x H x W, got " + shape_to_string(feature_map.shape()));
  }
  const std::size_t b = feature_map.dim(0), c = feature_map.dim(1), h = feature_map.dim(2), w = feature_map.dim(3);
  Tensor v = reshape(permute(feature_map, {0, 2, 3, 1}), {b * h * w, c});
  return VertexSet{std::move(v), b, h, w};
}

Tensor unflatten_features(const Tensor& vertices, const VertexSet& layout) {
  if (vertices.rank() != 2 || vertices.dim(0) != layout.size()) {
    throw ShapeError("unflatten_features", "vertex count does not match provenance of " + std::to_string(layout.size()) +
                                               " grid positions, got " + shape_to_string(vertices.shape()));
  }
  const std::size_t c = vertices.dim(1);
  return permute(reshape(vertices, {layout.batch, layout.height, layout.width, c}), {0, 3, 1, 2});
}

std::vector<std::size_t> nearest_neighbours(const std::vector<double>& sq_distances_row, std::size_t query,
                                            std::size_t k) {
  std::vector<std::size_t> candidates;
  candidates.reserve(sq_distances_row.size());
  for (std::size_t i = 0; i < sq_distances_row.size(); ++i) {
    if (i != query) candidates.push_back(i);
  }
  k = std::min(k, candidates.size());
  auto closer = [&](std::size_t a, std::size_t b) {
    if (sq_distances_row[a] != sq_distances_row[b]) return sq_distances_row[a] < sq_distances_row[b];
    return a < b;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(k), candidates.end(), closer);
  candidates.resize(k);
  return candidates;
}

namespace {

Hypergraph knn_hypergraph(const VertexSet& vertices, const std::vector<std::size_t>& k_per_vertex) {
  const std::size_t n = vertices.size();
  const std::vector<double> d = pairwise_sq_distances(vertices);
  std::vector<std::vector<std::size_t>> members(n);
  std::vector<double> row(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::copy_n(d.begin() + static_cast<long>(j * n), n, row.begin());
    members[j] = nearest_neighbours(row, j, std::min(k_per_vertex[j], n - 1));
    members[j].push_back(j);
  }
  return Hypergraph(n, std::move(members));
}

}  // namespace

Hypergraph knn_first_pass(const VertexSet& vertices) {
  check_vertex_set("knn_first_pass", vertices);
  const std::size_t n = vertices.size();
  if (n < 2) throw std::invalid_argument("knn_first_pass: need at least 2 vertices, got " + std::to_string(n));
  return knn_hypergraph(vertices, std::vector<std::size_t>(n, 1));
}

Hypergraph knn_second_pass(const VertexSet& vertices, const Hypergraph& preliminary) {
  check_vertex_set("knn_second_pass", vertices);
  const std::size_t n = vertices.size();
  if (preliminary.num_vertices() != n) {
    throw std::invalid_argument("knn_second_pass: preliminary hypergraph has " +
                                std::to_string(preliminary.num_vertices()) + " vertices, vertex set has " +
                                std::to_string(n));
  }
  std::vector<std::size_t> k(n);
  for (std::size_t j = 0; j < n; ++j) k[j] = preliminary.vertex_degree(j);
  return knn_hypergraph(vertices, k);
}

Hypergraph build_hypergraph(const VertexSet& vertices) {
  return knn_second_pass(vertices, knn_first_pass(vertices));
}

Tensor hgnn_propagate(const Hypergraph& graph, const VertexSet& vertices, const Tensor& edge_weights) {
  check_vertex_set("hgnn_propagate", vertices);
  const std::size_t n = graph.num_vertices();
  if (vertices.size() != n) throw ShapeError("hgnn_propagate", "hypergraph and vertex set sizes differ");
  if (edge_weights.shape() != Shape{n}) throw ShapeError("hgnn_propagate", Shape{n}, edge_weights.shape());

  // left = Dv^-1/2 H, right = De^-1 H^T Dv^-1/2; both are constants of the topology.
  std::vector<double> left(n * n, 0.0), right(n * n, 0.0);
  std::vector<double> dv_inv_sqrt(n);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t deg = graph.vertex_degree(v);
    if (deg == 0) throw DomainError("hgnn_propagate", "vertex " + std::to_string(v) + " has zero degree");
    dv_inv_sqrt[v] = 1.0 / std::sqrt(static_cast<double>(deg));
  }
  for (std::size_t e = 0; e < n; ++e) {
    const std::size_t deg = graph.edge_degree(e);
    if (deg == 0) throw DomainError("hgnn_propagate", "edge " + std::to_string(e) + " has zero degree");
    const double de_inv = 1.0 / static_cast<double>(deg);
    for (std::size_t v : graph.members(e)) {
      left[v * n + e] = dv_inv_sqrt[v];
      right[e * n + v] = de_inv * dv_inv_sqrt[v];
    }
  }
  Tensor l({n, n}, std::move(left));
  Tensor r({n, n}, std::move(right));
  return matmul(l, matmul(diag(edge_weights), matmul(r, vertices.features)));
}

Tensor fuse(const Tensor& propagated, const VertexSet& layout, const Tensor& original, const Tensor& kernel,
            const Tensor& bias) {
  if (original.rank() != 4 || original.dim(0) != layout.batch || original.dim(2) != layout.height ||
      original.dim(3) != layout.width) {
    throw ShapeError("fuse", "original feature map " + shape_to_string(original.shape()) +
                                 " does not match vertex provenance");
  }
  Tensor grid = unflatten_features(propagated, layout);
  if (grid.dim(1) != original.dim(1)) throw ShapeError("fuse", grid.shape(), original.shape());
  return conv2d(concat({grid, original}, 1), kernel, bias, Padding::Valid);
}

void write_incidence_coo(std::ostream& out, const Hypergraph& graph) {
  for (std::size_t e = 0; e < graph.num_edges(); ++e) {
    for (std::size_t v : graph.members(e)) out << v << ' ' << e << '\n';
  }
}

}  // namespace rehydil
