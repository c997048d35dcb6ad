#include "lbc/eval.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "lbc/codec.hpp"

namespace lbc {

std::vector<RDPoint> evaluate_model(const Model& model, const std::string& model_id,
                                    const std::vector<std::string>& image_ids,
                                    const std::vector<ImageRGB>& images) {
  if (images.empty() || image_ids.size() != images.size()) {
    throw Error("evaluate_model needs one id per image and at least one image");
  }
  std::vector<RDPoint> rows;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto enc = encode_image(images[i], model);
    rows.push_back({image_ids[i], model_id, model.hps().lambda_index, enc.stats.bpp, enc.stats.psnr});
  }
  rows.push_back(average_point(rows, model_id));
  return rows;
}

RDPoint average_point(const std::vector<RDPoint>& rows, const std::string& model_id) {
  RDPoint avg{kAverageRow, model_id, 0, 0.0, 0.0};
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.model != model_id || r.image == kAverageRow) continue;
    avg.lambda_index = r.lambda_index;
    avg.bpp += r.bpp;
    avg.psnr += r.psnr;
    ++n;
  }
  if (n == 0) throw Error("no rows for model " + model_id);
  avg.bpp /= static_cast<double>(n);
  avg.psnr /= static_cast<double>(n);
  return avg;
}

std::string rd_table_csv(const std::vector<RDPoint>& rows) {
  std::ostringstream out;
  out << "image,model,lambda_index,bpp,psnr\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.image << ',' << r.model << ',' << r.lambda_index << ',' << r.bpp << ',';
    if (std::isinf(r.psnr)) {
      out << "inf";
    } else {
      out << r.psnr;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<RDPoint> parse_rd_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "image,model,lambda_index,bpp,psnr") {
    throw DataError("RD table: missing header");
  }
  std::vector<RDPoint> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw DataError("RD table: bad row '" + line + "'");
    RDPoint p;
    p.image = f[0];
    p.model = f[1];
    try {
      p.lambda_index = std::stoi(f[2]);
      p.bpp = std::stod(f[3]);
      p.psnr = f[4] == "inf" ? std::numeric_limits<double>::infinity() : std::stod(f[4]);
    } catch (const std::exception&) {
      throw DataError("RD table: bad number in '" + line + "'");
    }
    rows.push_back(p);
  }
  return rows;
}

}  // namespace lbc
