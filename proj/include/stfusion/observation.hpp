#pragma once

#include <map>
#include <string>
#include <vector>

#include "stfusion/geometry.hpp"

namespace stfusion {

struct PointObs {
  int variable_id = 1;  // 1-based, response is K+1
  Point2 location;
  int time_index = 1;  // 1-based
  double value = 0.0;
};

struct BlockObs {
  int variable_id = 1;
  Rect cell;
  int time_index = 1;
  double value = 0.0;
};

struct ObservationBatch {
  std::vector<PointObs> points;
  std::vector<BlockObs> blocks;
  std::map<int, std::string> variable_names;
};

// Sparse map from one field's stacked latent vector (time-major, n*T) to
// m observations. Every row sums to 1.
struct ObsOperator {
  SpMat A;
};

ObsOperator point_operator(const Mesh& mesh, const std::vector<PointObs>& obs, int T);

struct BlockOperatorOptions {
  bool centroid_fallback = true;  // empty cell -> barycentric row at centroid
};

ObsOperator block_operator(const Mesh& mesh, const std::vector<BlockObs>& obs, int T,
                           const BlockOperatorOptions& opts = {},
                           std::vector<std::string>* warnings = nullptr);

// Vertices of `mesh` inside the closed cell (boundary inclusive).
std::vector<int> vertices_in_cell(const Mesh& mesh, const Rect& cell);

// CSV header: variable,easting,northing,time,value
std::vector<PointObs> ingest_points(const std::string& path,
                                    std::vector<std::string>* warnings = nullptr,
                                    const Rect* domain = nullptr);
// CSV header: variable,xmin,xmax,ymin,ymax,time,value
std::vector<BlockObs> ingest_blocks(const std::string& path,
                                    std::vector<std::string>* warnings = nullptr,
                                    const Rect* domain = nullptr);

void write_points_csv(const std::string& path, const std::vector<PointObs>& obs);
void write_blocks_csv(const std::string& path, const std::vector<BlockObs>& obs);

}  // namespace stfusion
