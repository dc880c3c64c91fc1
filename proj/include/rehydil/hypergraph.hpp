#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "rehydil/tensor.hpp"

namespace rehydil {

struct GridPosition {
  std::size_t batch;
  std::size_t row;
  std::size_t col;
};

/// Feature-map pixels as hypergraph vertices. Vertex j maps to grid position
/// (b, r, c) with j = (b * height + r) * width + c.
struct VertexSet {
  Tensor features;  // N x C
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return batch * height * width; }
  std::size_t channels() const { return features.dim(1); }
  GridPosition origin(std::size_t vertex) const;
};

/// One hyperedge per vertex: edge j = {v_j} plus the K(j) nearest other
/// vertices. The incidence matrix is square (vertices x edges) and stored
/// densely as 0/1 bytes.
class Hypergraph {
 public:
  Hypergraph() = default;
  /// `members[e]` lists the vertices of edge e; the edge's own vertex must be
  /// among them.
  Hypergraph(std::size_t num_vertices, std::vector<std::vector<std::size_t>> members);

  std::size_t num_vertices() const { return n_; }
  std::size_t num_edges() const { return n_; }
  bool contains(std::size_t vertex, std::size_t edge) const { return incidence_[vertex * n_ + edge] != 0; }
  const std::vector<std::size_t>& members(std::size_t edge) const { return members_[edge]; }
  /// Number of edges containing the vertex (row sum of H).
  std::size_t vertex_degree(std::size_t vertex) const { return vertex_degrees_[vertex]; }
  /// Number of vertices in the edge (column sum of H).
  std::size_t edge_degree(std::size_t edge) const { return members_[edge].size(); }
  /// Neighbour count K(j) used to build edge j (edge degree minus the self vertex).
  std::size_t neighbour_count(std::size_t edge) const { return members_[edge].size() - 1; }
  const std::vector<std::uint8_t>& incidence() const { return incidence_; }
  /// Incidence as an N x N constant tensor.
  Tensor incidence_tensor() const;

 private:
  std::size_t n_ = 0;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<std::uint8_t> incidence_;
  std::vector<std::size_t> vertex_degrees_;
};

/// B x C x H x W -> (B*H*W) x C, batch-major then row then column. Differentiable.
VertexSet flatten_features(const Tensor& feature_map);
/// Inverse of flatten_features for an N x C tensor laid out like `layout`.
Tensor unflatten_features(const Tensor& vertices, const VertexSet& layout);

/// Indices of the k nearest vertices to `query` (self excluded) under
/// Euclidean distance, ordered by (distance, index).
std::vector<std::size_t> nearest_neighbours(const std::vector<double>& sq_distances_row, std::size_t query,
                                            std::size_t k);

/// Preliminary hypergraph: each edge holds its vertex and its single nearest neighbour.
Hypergraph knn_first_pass(const VertexSet& vertices);
/// Rebuilds every edge with K(j) = degree of v_j in `preliminary`, clamped to N-1.
Hypergraph knn_second_pass(const VertexSet& vertices, const Hypergraph& preliminary);
/// Both passes.
Hypergraph build_hypergraph(const VertexSet& vertices);

/// V' = Dv^-1/2 H We De^-1 H^T Dv^-1/2 V. `edge_weights` is the length-N
/// diagonal of We; gradients flow to V and We, not to the topology.
Tensor hgnn_propagate(const Hypergraph& graph, const VertexSet& vertices, const Tensor& edge_weights);

/// Reshapes `propagated` (N x C) back onto the grid of `layout`, concatenates
/// [propagated, original] along channels and applies a 1x1 convolution
/// (`kernel` C x 2C x 1 x 1, `bias` C or undefined).
Tensor fuse(const Tensor& propagated, const VertexSet& layout, const Tensor& original, const Tensor& kernel,
            const Tensor& bias);

/// Sparse coordinate dump: one "vertex edge" pair per line, edges ascending,
/// vertices ascending within an edge.
void write_incidence_coo(std::ostream& out, const Hypergraph& graph);

}  // namespace rehydil
