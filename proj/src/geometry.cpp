#include "stfusion/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stfusion {

double Rect::diagonal() const { return std::hypot(width(), height()); }

double Mesh::triangle_area(int t) const {
  const auto& tri = triangles[t];
  const Point2& a = vertices[tri[0]];
  const Point2& b = vertices[tri[1]];
  const Point2& c = vertices[tri[2]];
  return 0.5 * ((b.easting - a.easting) * (c.northing - a.northing) -
                (c.easting - a.easting) * (b.northing - a.northing));
}

double Mesh::total_area() const {
  double s = 0.0;
  for (int t = 0; t < n_triangles(); ++t) s += triangle_area(t);
  return s;
}

Mesh build_structured_mesh(const Rect& bbox, double target_edge_length,
                           double buffer_width) {
  if (!(target_edge_length > 0.0))
    throw std::invalid_argument("build_structured_mesh: edge length must be > 0");
  if (buffer_width < 0.0)
    throw std::invalid_argument("build_structured_mesh: buffer must be >= 0");
  if (!(bbox.width() > 0.0) || !(bbox.height() > 0.0))
    throw std::invalid_argument("build_structured_mesh: degenerate bbox");

  Mesh m;
  m.interior_bbox = bbox;
  m.buffer_width = buffer_width;
  m.hull = bbox.expanded(buffer_width);

  const double w = m.hull.width();
  const double h = m.hull.height();
  const int cx = std::max(1, static_cast<int>(std::ceil(w / target_edge_length - 1e-12)));
  const int cy = std::max(1, static_cast<int>(std::ceil(h / target_edge_length - 1e-12)));
  m.nx = cx + 1;
  m.ny = cy + 1;
  m.dx = w / cx;
  m.dy = h / cy;

  m.vertices.reserve(static_cast<size_t>(m.nx) * m.ny);
  for (int j = 0; j < m.ny; ++j)
    for (int i = 0; i < m.nx; ++i)
      m.vertices.push_back({m.hull.xmin + i * m.dx, m.hull.ymin + j * m.dy});

  auto vid = [&](int i, int j) { return j * m.nx + i; };
  m.triangles.reserve(static_cast<size_t>(cx) * cy * 2);
  for (int j = 0; j < cy; ++j) {
    for (int i = 0; i < cx; ++i) {
      // split along the SW-NE diagonal, both triangles CCW
      m.triangles.push_back({vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)});
      m.triangles.push_back({vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)});
    }
  }
  return m;
}

FemMatrices assemble_fem(const Mesh& mesh) {
  const int n = mesh.n_vertices();
  Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
  std::vector<Eigen::Triplet<double>> gt;
  gt.reserve(static_cast<size_t>(mesh.n_triangles()) * 9);

  for (int t = 0; t < mesh.n_triangles(); ++t) {
    const auto& tri = mesh.triangles[t];
    const double area = mesh.triangle_area(t);
    if (!(area > 0.0))
      throw std::runtime_error("assemble_fem: non-positive triangle area");
    const Point2& p0 = mesh.vertices[tri[0]];
    const Point2& p1 = mesh.vertices[tri[1]];
    const Point2& p2 = mesh.vertices[tri[2]];
    // gradients of the P1 hat functions
    const double b[3] = {p1.northing - p2.northing, p2.northing - p0.northing,
                         p0.northing - p1.northing};
    const double cc[3] = {p2.easting - p1.easting, p0.easting - p2.easting,
                          p1.easting - p0.easting};
    for (int a = 0; a < 3; ++a) {
      c[tri[a]] += area / 3.0;
      for (int bidx = 0; bidx < 3; ++bidx) {
        const double g = (b[a] * b[bidx] + cc[a] * cc[bidx]) / (4.0 * area);
        gt.emplace_back(tri[a], tri[bidx], g);
      }
    }
  }

  FemMatrices fem;
  fem.c_diag = c;
  fem.C.resize(n, n);
  std::vector<Eigen::Triplet<double>> ct;
  ct.reserve(n);
  for (int i = 0; i < n; ++i) ct.emplace_back(i, i, c[i]);
  fem.C.setFromTriplets(ct.begin(), ct.end());
  fem.G.resize(n, n);
  fem.G.setFromTriplets(gt.begin(), gt.end());
  return fem;
}

namespace {

bool bary_in_triangle(const Mesh& mesh, int t, const Point2& p,
                      Barycentric& out, double tol) {
  const auto& tri = mesh.triangles[t];
  const Point2& a = mesh.vertices[tri[0]];
  const Point2& b = mesh.vertices[tri[1]];
  const Point2& c = mesh.vertices[tri[2]];
  const double det = (b.easting - a.easting) * (c.northing - a.northing) -
                     (c.easting - a.easting) * (b.northing - a.northing);
  const double w1 = ((p.easting - a.easting) * (c.northing - a.northing) -
                     (c.easting - a.easting) * (p.northing - a.northing)) / det;
  const double w2 = ((b.easting - a.easting) * (p.northing - a.northing) -
                     (p.easting - a.easting) * (b.northing - a.northing)) / det;
  const double w0 = 1.0 - w1 - w2;
  if (w0 < -tol || w1 < -tol || w2 < -tol) return false;
  out.triangle = t;
  out.vertex = tri;
  out.weight = {std::max(0.0, w0), std::max(0.0, w1), std::max(0.0, w2)};
  const double s = out.weight[0] + out.weight[1] + out.weight[2];
  for (auto& w : out.weight) w /= s;
  return true;
}

}  // namespace

Barycentric locate(const Mesh& mesh, const Point2& p) {
  const double tol = 1e-10 * std::max(1.0, mesh.hull.diagonal());
  Barycentric out;
  if (mesh.nx > 0) {
    if (p.easting < mesh.hull.xmin - tol || p.easting > mesh.hull.xmax + tol ||
        p.northing < mesh.hull.ymin - tol || p.northing > mesh.hull.ymax + tol)
      throw std::runtime_error("locate: point outside mesh hull");
    int i = std::clamp(static_cast<int>((p.easting - mesh.hull.xmin) / mesh.dx),
                       0, mesh.nx - 2);
    int j = std::clamp(static_cast<int>((p.northing - mesh.hull.ymin) / mesh.dy),
                       0, mesh.ny - 2);
    const int base = 2 * (j * (mesh.nx - 1) + i);
    for (int cand : {base, base + 1})
      if (bary_in_triangle(mesh, cand, p, out, 1e-9)) return out;
    // fall through to the linear scan for points on cell seams
  }
  for (int t = 0; t < mesh.n_triangles(); ++t)
    if (bary_in_triangle(mesh, t, p, out, 1e-9)) return out;
  throw std::runtime_error("locate: point outside mesh hull");
}

void save_mesh(const Mesh& mesh, std::ostream& os) {
  os << "vertices " << mesh.n_vertices() << " triangles " << mesh.n_triangles()
     << "\n";
  os.precision(17);
  for (const auto& v : mesh.vertices) os << v.easting << " " << v.northing << "\n";
  for (const auto& t : mesh.triangles) os << t[0] << " " << t[1] << " " << t[2] << "\n";
}

void save_mesh(const Mesh& mesh, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_mesh: cannot open " + path);
  save_mesh(mesh, os);
}

Mesh load_mesh(std::istream& is) {
  std::string kw1, kw2;
  int n = 0, m = 0;
  if (!(is >> kw1 >> n >> kw2 >> m) || kw1 != "vertices" || kw2 != "triangles")
    throw std::runtime_error("load_mesh: bad header");
  Mesh mesh;
  mesh.vertices.resize(n);
  for (auto& v : mesh.vertices)
    if (!(is >> v.easting >> v.northing))
      throw std::runtime_error("load_mesh: truncated vertex list");
  mesh.triangles.resize(m);
  for (auto& t : mesh.triangles) {
    if (!(is >> t[0] >> t[1] >> t[2]))
      throw std::runtime_error("load_mesh: truncated triangle list");
    for (int k : t)
      if (k < 0 || k >= n) throw std::runtime_error("load_mesh: vertex index out of range");
  }
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& v : mesh.vertices) {
    xmin = std::min(xmin, v.easting);
    xmax = std::max(xmax, v.easting);
    ymin = std::min(ymin, v.northing);
    ymax = std::max(ymax, v.northing);
  }
  // the text format does not carry the buffer; treat the hull as interior
  mesh.hull = {xmin, xmax, ymin, ymax};
  mesh.interior_bbox = mesh.hull;
  mesh.buffer_width = 0.0;
  return mesh;
}

Mesh load_mesh(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_mesh: cannot open " + path);
  return load_mesh(is);
}

}  // namespace stfusion
