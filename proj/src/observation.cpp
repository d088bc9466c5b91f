#include "stfusion/observation.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stfusion {

ObsOperator point_operator(const Mesh& mesh, const std::vector<PointObs>& obs, int T) {
  const int n = mesh.n_vertices();
  SpMat A(static_cast<int>(obs.size()), n * T);
  std::vector<Eigen::Triplet<double>> tr;
  tr.reserve(obs.size() * 3);
  for (size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].time_index < 1 || obs[i].time_index > T)
      throw std::runtime_error("point_operator: observation " + std::to_string(i) +
                               " has time index out of range");
    Barycentric b;
    try {
      b = locate(mesh, obs[i].location);
    } catch (const std::exception&) {
      throw std::runtime_error("point_operator: observation " + std::to_string(i) +
                               " is outside the mesh hull");
    }
    const int off = (obs[i].time_index - 1) * n;
    for (int k = 0; k < 3; ++k)
      if (b.weight[k] != 0.0)
        tr.emplace_back(static_cast<int>(i), off + b.vertex[k], b.weight[k]);
  }
  A.setFromTriplets(tr.begin(), tr.end());
  A.makeCompressed();
  return {std::move(A)};
}

std::vector<int> vertices_in_cell(const Mesh& mesh, const Rect& cell) {
  std::vector<int> ids;
  const double tol = 1e-12 * std::max(1.0, mesh.hull.diagonal());
  for (int i = 0; i < mesh.n_vertices(); ++i) {
    const Point2& v = mesh.vertices[i];
    if (v.easting >= cell.xmin - tol && v.easting <= cell.xmax + tol &&
        v.northing >= cell.ymin - tol && v.northing <= cell.ymax + tol)
      ids.push_back(i);
  }
  return ids;
}

ObsOperator block_operator(const Mesh& mesh, const std::vector<BlockObs>& obs, int T,
                           const BlockOperatorOptions& opts,
                           std::vector<std::string>* warnings) {
  const int n = mesh.n_vertices();
  SpMat A(static_cast<int>(obs.size()), n * T);
  std::vector<Eigen::Triplet<double>> tr;
  for (size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].time_index < 1 || obs[i].time_index > T)
      throw std::runtime_error("block_operator: observation " + std::to_string(i) +
                               " has time index out of range");
    const int off = (obs[i].time_index - 1) * n;
    const auto ids = vertices_in_cell(mesh, obs[i].cell);
    if (!ids.empty()) {
      const double w = 1.0 / static_cast<double>(ids.size());
      for (int id : ids) tr.emplace_back(static_cast<int>(i), off + id, w);
    } else if (opts.centroid_fallback) {
      if (warnings)
        warnings->push_back("block observation " + std::to_string(i) +
                            ": cell contains no mesh vertex, using centroid");
      const Barycentric b = locate(mesh, obs[i].cell.centroid());
      for (int k = 0; k < 3; ++k)
        if (b.weight[k] != 0.0)
          tr.emplace_back(static_cast<int>(i), off + b.vertex[k], b.weight[k]);
    } else {
      throw std::runtime_error("block_operator: cell of observation " +
                               std::to_string(i) + " contains no mesh vertex");
    }
  }
  A.setFromTriplets(tr.begin(), tr.end());
  A.makeCompressed();
  return {std::move(A)};
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) {
    // trim whitespace
    size_t b = cur.find_first_not_of(" \t\r");
    size_t e = cur.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cur.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

double parse_num(const std::string& s, int line_no, const std::string& col,
                 std::vector<std::string>& errors) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    errors.push_back("line " + std::to_string(line_no) + ": non-numeric value '" +
                     s + "' in column " + col);
    return 0.0;
  }
}

void check_header(const std::vector<std::string>& got,
                  const std::vector<std::string>& want, const std::string& path) {
  if (got != want) {
    std::string msg = "bad header in " + path + "; expected";
    for (const auto& c : want) msg += " " + c;
    throw std::runtime_error(msg);
  }
}

void throw_if_errors(const std::vector<std::string>& errors, const std::string& path) {
  if (errors.empty()) return;
  std::string msg = "invalid rows in " + path + ":";
  for (const auto& e : errors) msg += "\n  " + e;
  throw std::runtime_error(msg);
}

}  // namespace

std::vector<PointObs> ingest_points(const std::string& path,
                                    std::vector<std::string>* warnings,
                                    const Rect* domain) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("ingest_points: cannot open " + path);
  std::string line;
  std::vector<PointObs> out;
  std::vector<std::string> errors;
  if (!std::getline(is, line)) {
    if (warnings) warnings->push_back(path + " is empty");
    return out;
  }
  check_header(split_csv_line(line), {"variable", "easting", "northing", "time", "value"},
               path);
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 5) {
      errors.push_back("line " + std::to_string(line_no) + ": expected 5 columns, got " +
                       std::to_string(f.size()));
      continue;
    }
    PointObs o;
    o.variable_id = static_cast<int>(parse_num(f[0], line_no, "variable", errors));
    o.location = {parse_num(f[1], line_no, "easting", errors),
                  parse_num(f[2], line_no, "northing", errors)};
    o.time_index = static_cast<int>(parse_num(f[3], line_no, "time", errors));
    o.value = parse_num(f[4], line_no, "value", errors);
    if (o.variable_id < 1)
      errors.push_back("line " + std::to_string(line_no) + ": variable id must be >= 1");
    if (o.time_index < 1)
      errors.push_back("line " + std::to_string(line_no) + ": time index must be >= 1");
    if (domain && !domain->contains(o.location))
      errors.push_back("line " + std::to_string(line_no) + ": location outside domain");
    out.push_back(o);
  }
  throw_if_errors(errors, path);
  if (out.empty() && warnings) warnings->push_back(path + " contains no observations");
  return out;
}

std::vector<BlockObs> ingest_blocks(const std::string& path,
                                    std::vector<std::string>* warnings,
                                    const Rect* domain) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("ingest_blocks: cannot open " + path);
  std::string line;
  std::vector<BlockObs> out;
  std::vector<std::string> errors;
  if (!std::getline(is, line)) {
    if (warnings) warnings->push_back(path + " is empty");
    return out;
  }
  check_header(split_csv_line(line),
               {"variable", "xmin", "xmax", "ymin", "ymax", "time", "value"}, path);
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 7) {
      errors.push_back("line " + std::to_string(line_no) + ": expected 7 columns, got " +
                       std::to_string(f.size()));
      continue;
    }
    BlockObs o;
    o.variable_id = static_cast<int>(parse_num(f[0], line_no, "variable", errors));
    o.cell = {parse_num(f[1], line_no, "xmin", errors),
              parse_num(f[2], line_no, "xmax", errors),
              parse_num(f[3], line_no, "ymin", errors),
              parse_num(f[4], line_no, "ymax", errors)};
    o.time_index = static_cast<int>(parse_num(f[5], line_no, "time", errors));
    o.value = parse_num(f[6], line_no, "value", errors);
    if (!(o.cell.area() > 0.0))
      errors.push_back("line " + std::to_string(line_no) + ": cell has non-positive area");
    if (o.variable_id < 1)
      errors.push_back("line " + std::to_string(line_no) + ": variable id must be >= 1");
    if (o.time_index < 1)
      errors.push_back("line " + std::to_string(line_no) + ": time index must be >= 1");
    if (domain &&
        (o.cell.xmax < domain->xmin || o.cell.xmin > domain->xmax ||
         o.cell.ymax < domain->ymin || o.cell.ymin > domain->ymax))
      errors.push_back("line " + std::to_string(line_no) + ": cell outside domain");
    out.push_back(o);
  }
  throw_if_errors(errors, path);
  if (out.empty() && warnings) warnings->push_back(path + " contains no observations");
  return out;
}

void write_points_csv(const std::string& path, const std::vector<PointObs>& obs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_points_csv: cannot open " + path);
  os << "variable,easting,northing,time,value\n";
  char buf[160];
  for (const auto& o : obs) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%d,%.12g\n", o.variable_id,
                  o.location.easting, o.location.northing, o.time_index, o.value);
    os << buf;
  }
}

void write_blocks_csv(const std::string& path, const std::vector<BlockObs>& obs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_blocks_csv: cannot open " + path);
  os << "variable,xmin,xmax,ymin,ymax,time,value\n";
  char buf[200];
  for (const auto& o : obs) {
    std::snprintf(buf, sizeof buf, "%d,%.12g,%.12g,%.12g,%.12g,%d,%.12g\n",
                  o.variable_id, o.cell.xmin, o.cell.xmax, o.cell.ymin, o.cell.ymax,
                  o.time_index, o.value);
    os << buf;
  }
}

}  // namespace stfusion
