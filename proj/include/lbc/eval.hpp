#pragma once

// Rate-distortion evaluation: per-image points and dataset averages, where
// PSNR and bpp are averaged independently per model.

#include <string>
#include <vector>

#include "lbc/blocks.hpp"
#include "lbc/layers.hpp"

namespace lbc {

struct RDPoint {
  std::string image;  // "average" for the dataset row
  std::string model;
  int lambda_index = 0;
  double bpp = 0.0;
  double psnr = 0.0;  // +inf for a lossless reconstruction

  bool operator==(const RDPoint&) const = default;
};

inline constexpr const char* kAverageRow = "average";

// One row per image followed by the average row. Throws Error on an empty set
// or mismatched id/image counts.
std::vector<RDPoint> evaluate_model(const Model& model, const std::string& model_id,
                                    const std::vector<std::string>& image_ids,
                                    const std::vector<ImageRGB>& images);

// Arithmetic means of bpp and PSNR over the non-average rows of one model.
RDPoint average_point(const std::vector<RDPoint>& rows, const std::string& model_id);

// Header "image,model,lambda_index,bpp,psnr"; doubles written with 17
// significant digits so parsing returns identical values; infinite PSNR as "inf".
std::string rd_table_csv(const std::vector<RDPoint>& rows);
std::vector<RDPoint> parse_rd_csv(const std::string& text);

}  // namespace lbc
