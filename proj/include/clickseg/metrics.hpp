#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "clickseg/annotate.hpp"
#include "clickseg/video.hpp"

namespace clickseg {

/// Intersection over union; two empty masks score 1.
double region_j(const Bitmap& pred, const Bitmap& gt);

/// Boundary F-measure. Boundaries are set pixels with a 4-neighbor outside
/// the mask (the image edge counts as outside); matching admits Chebyshev
/// distance <= tolerance. Both boundaries empty scores 1.
double boundary_f(const Bitmap& pred, const Bitmap& gt, int tolerance);

/// DAVIS-style default: ceil(0.008 * image diagonal), at least 1.
int default_boundary_tolerance(Index h, Index w);

struct EvalOptions {
  bool include_first = true;    // score frame 1 along with the rest
  bool first_frame_only = false;  // score only frame 1
  int tolerance = 0;            // 0 = derive from image size
};

struct EvalRow {
  std::string sequence;
  int object_id = 0;
  Index frame = 0;  // 1-based
  double j = 0.0, f = 0.0;
};

struct SequenceScore {
  std::string sequence;
  double j = 0.0, f = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<SequenceScore> sequences;
  double j = 0.0, f = 0.0, jandf = 0.0;  // dataset means; jandf = (j + f) / 2
};

/// Per sequence, per foreground object, per scored frame: binary J and F;
/// aggregation is object-mean, then sequence-mean, then dataset-mean.
/// Object ids are taken from the ground truth (union over frames).
EvalReport evaluate(const std::vector<std::vector<Mask>>& pred,
                    const std::vector<std::vector<Mask>>& gt,
                    const std::vector<std::string>& names, const EvalOptions& options = {});

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace clickseg
