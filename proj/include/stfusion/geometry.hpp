#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace stfusion {

using SpMat = Eigen::SparseMatrix<double>;

struct Point2 {
  double easting = 0.0;
  double northing = 0.0;
};

struct Rect {
  double xmin = 0.0, xmax = 0.0, ymin = 0.0, ymax = 0.0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  double diagonal() const;
  bool contains(const Point2& p) const {
    return p.easting >= xmin && p.easting <= xmax && p.northing >= ymin &&
           p.northing <= ymax;
  }
  Rect expanded(double margin) const {
    return {xmin - margin, xmax + margin, ymin - margin, ymax + margin};
  }
  Point2 centroid() const {
    return {0.5 * (xmin + xmax), 0.5 * (ymin + ymax)};
  }
};

// Triangulated rectangle with an optional boundary buffer. Structured
// split-square triangulations carry grid metadata (nx, ny) so point
// location is O(1); meshes loaded from file fall back to a bin index.
struct Mesh {
  std::vector<Point2> vertices;
  std::vector<std::array<int, 3>> triangles;
  Rect interior_bbox;
  Rect hull;  // interior bbox expanded by the buffer
  double buffer_width = 0.0;

  // structured-grid metadata; nx == 0 means "not structured"
  int nx = 0, ny = 0;
  double dx = 0.0, dy = 0.0;

  int n_vertices() const { return static_cast<int>(vertices.size()); }
  int n_triangles() const { return static_cast<int>(triangles.size()); }
  double triangle_area(int t) const;
  double total_area() const;
};

Mesh build_structured_mesh(const Rect& bbox, double target_edge_length,
                           double buffer_width);

// Lumped mass matrix C (diagonal) and P1 stiffness matrix G.
struct FemMatrices {
  SpMat C;
  SpMat G;
  Eigen::VectorXd c_diag;
};

FemMatrices assemble_fem(const Mesh& mesh);

struct Barycentric {
  int triangle = -1;
  std::array<int, 3> vertex{};
  std::array<double, 3> weight{};
};

// Throws std::runtime_error when p lies outside the mesh hull.
Barycentric locate(const Mesh& mesh, const Point2& p);

// Plain-text mesh format: "vertices N triangles M", N "x y" lines,
// M "i j k" lines (0-based).
void save_mesh(const Mesh& mesh, std::ostream& os);
void save_mesh(const Mesh& mesh, const std::string& path);
Mesh load_mesh(std::istream& is);
Mesh load_mesh(const std::string& path);

}  // namespace stfusion
