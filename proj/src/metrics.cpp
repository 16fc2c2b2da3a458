#include "clickseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace clickseg {

namespace {

void require_same_shape(const Bitmap& a, const Bitmap& b) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeError("mask shape mismatch: (" + std::to_string(a.h) + ", " +
                     std::to_string(a.w) + ") vs (" + std::to_string(b.h) + ", " +
                     std::to_string(b.w) + ")");
}

Bitmap boundary_of(const Bitmap& mask) {
  Bitmap edge(mask.h, mask.w);
  for (Index y = 0; y < mask.h; ++y)
    for (Index x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      const bool outside =
          y == 0 || y == mask.h - 1 || x == 0 || x == mask.w - 1 || !mask.at(y - 1, x) ||
          !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1);
      edge.at(y, x) = outside ? 1 : 0;
    }
  return edge;
}

// Chebyshev dilation by `radius` = that many passes of the full 3x3 element.
Bitmap chebyshev_dilate(const Bitmap& mask, int radius) {
  Bitmap cur = mask;
  for (int r = 0; r < radius; ++r) {
    Bitmap next(cur.h, cur.w);
    for (Index y = 0; y < cur.h; ++y)
      for (Index x = 0; x < cur.w; ++x) {
        bool any = false;
        for (Index dy = -1; dy <= 1 && !any; ++dy)
          for (Index dx = -1; dx <= 1 && !any; ++dx) {
            const Index ny = y + dy, nx = x + dx;
            any = ny >= 0 && ny < cur.h && nx >= 0 && nx < cur.w && cur.at(ny, nx);
          }
        next.at(y, x) = any ? 1 : 0;
      }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

double region_j(const Bitmap& pred, const Bitmap& gt) {
  require_same_shape(pred, gt);
  Index inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double boundary_f(const Bitmap& pred, const Bitmap& gt, int tolerance) {
  require_same_shape(pred, gt);
  if (tolerance < 1) throw ShapeError("boundary tolerance must be >= 1");
  const Bitmap bp = boundary_of(pred);
  const Bitmap bg = boundary_of(gt);
  const Index np = bp.count(), ng = bg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;

  const Bitmap gt_zone = chebyshev_dilate(bg, tolerance);
  const Bitmap pred_zone = chebyshev_dilate(bp, tolerance);
  Index p_hit = 0, g_hit = 0;
  for (std::size_t i = 0; i < bp.data.size(); ++i) {
    p_hit += bp.data[i] && gt_zone.data[i];
    g_hit += bg.data[i] && pred_zone.data[i];
  }
  const double precision = static_cast<double>(p_hit) / static_cast<double>(np);
  const double recall = static_cast<double>(g_hit) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

int default_boundary_tolerance(Index h, Index w) {
  const double diag = std::sqrt(static_cast<double>(h * h + w * w));
  return std::max(1, static_cast<int>(std::ceil(0.008 * diag)));
}

EvalReport evaluate(const std::vector<std::vector<Mask>>& pred,
                    const std::vector<std::vector<Mask>>& gt,
                    const std::vector<std::string>& names, const EvalOptions& options) {
  if (pred.size() != gt.size() || names.size() != gt.size())
    throw ShapeError("evaluate: " + std::to_string(pred.size()) + " prediction vs " +
                     std::to_string(gt.size()) + " ground-truth sequences (" +
                     std::to_string(names.size()) + " names)");
  if (gt.empty()) throw ShapeError("evaluate: no sequences");

  std::string gaps;
  for (std::size_t s = 0; s < gt.size(); ++s)
    if (pred[s].size() != gt[s].size())
      gaps += (gaps.empty() ? "" : "; ") + names[s] + ": " +
              std::to_string(pred[s].size()) + " predicted vs " +
              std::to_string(gt[s].size()) + " ground-truth frames";
  if (!gaps.empty()) throw ShapeError("evaluate: frame-count gaps — " + gaps);

  EvalReport report;
  double j_total = 0.0, f_total = 0.0;
  for (std::size_t s = 0; s < gt.size(); ++s) {
    const auto& gseq = gt[s];
    const auto& pseq = pred[s];
    const Index t_count = static_cast<Index>(gseq.size());

    std::set<int> ids;
    for (const auto& m : gseq)
      for (auto v : m.data)
        if (v != 0) ids.insert(v);
    if (ids.empty())
      throw ShapeError("evaluate: sequence " + names[s] + " has no foreground object");

    const int tol = options.tolerance > 0
                        ? options.tolerance
                        : default_boundary_tolerance(gseq[0].h, gseq[0].w);

    double seq_j = 0.0, seq_f = 0.0;
    for (int id : ids) {
      double obj_j = 0.0, obj_f = 0.0;
      Index frames_scored = 0;
      for (Index t = 0; t < t_count; ++t) {
        if (options.first_frame_only && t != 0) continue;
        if (!options.first_frame_only && !options.include_first && t == 0) continue;
        const Bitmap pb = mask_region(pseq[t], id);
        const Bitmap gb = mask_region(gseq[t], id);
        const double jv = region_j(pb, gb);
        const double fv = boundary_f(pb, gb, tol);
        report.rows.push_back(EvalRow{names[s], id, t + 1, jv, fv});
        obj_j += jv;
        obj_f += fv;
        ++frames_scored;
      }
      if (frames_scored == 0)
        throw ShapeError("evaluate: no frames to score in sequence " + names[s]);
      seq_j += obj_j / static_cast<double>(frames_scored);
      seq_f += obj_f / static_cast<double>(frames_scored);
    }
    seq_j /= static_cast<double>(ids.size());
    seq_f /= static_cast<double>(ids.size());
    report.sequences.push_back(SequenceScore{names[s], seq_j, seq_f});
    j_total += seq_j;
    f_total += seq_f;
  }
  report.j = j_total / static_cast<double>(gt.size());
  report.f = f_total / static_cast<double>(gt.size());
  report.jandf = (report.j + report.f) / 2.0;
  return report;
}

void write_eval_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw FormatError(path.string() + ": cannot open for writing");
  out << "sequence,object_id,frame,J,F\n";
  out.precision(12);
  for (const auto& row : report.rows)
    out << row.sequence << "," << row.object_id << "," << row.frame << "," << row.j << ","
        << row.f << "\n";
  for (const auto& seq : report.sequences)
    out << seq.sequence << ",all,," << seq.j << "," << seq.f << "\n";
  out << "ALL,all,," << report.j << "," << report.f << "\n";
  out << "ALL,J&F,," << report.jandf << "," << report.jandf << "\n";
}

}  // namespace clickseg
