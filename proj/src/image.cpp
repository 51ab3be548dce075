#include "medprompt/image.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "medprompt/error.hpp"

namespace medprompt {

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kUndecodableImage, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Reads the next whitespace-delimited header field, skipping '#' comments.
struct HeaderReader {
  const std::string& bytes;
  std::size_t pos = 0;

  std::string field() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw Error(ErrorCode::kUndecodableImage, "truncated header");
    return bytes.substr(start, pos - start);
  }

  int number() {
    const std::string f = field();
    try {
      return std::stoi(f);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kUndecodableImage, "bad header field '" + f + "'");
    }
  }
};

}  // namespace

void RgbImage::fill_rect(int x1, int y1, int x2, int y2, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  for (int y = std::max(0, y1); y < std::min(height, y2); ++y)
    for (int x = std::max(0, x1); x < std::min(width, x2); ++x) {
      auto* p = at(x, y);
      p[0] = r;
      p[1] = g;
      p[2] = b;
    }
}

RgbImage decode_ppm(const std::string& bytes) {
  HeaderReader h{bytes};
  const std::string magic = h.field();
  if (magic != "P6" && magic != "P3") throw Error(ErrorCode::kUndecodableImage, "not a PPM image");
  const int w = h.number(), ht = h.number(), maxval = h.number();
  if (w <= 0 || ht <= 0 || maxval != 255) throw Error(ErrorCode::kUndecodableImage, "unsupported PPM header");
  RgbImage img(w, ht);
  if (magic == "P6") {
    const std::size_t start = h.pos + 1;
    if (bytes.size() < start + img.pixels.size()) throw Error(ErrorCode::kUndecodableImage, "truncated PPM data");
    std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(start),
              bytes.begin() + static_cast<std::ptrdiff_t>(start + img.pixels.size()), img.pixels.begin());
  } else {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(h.number());
  }
  return img;
}

RgbImage read_ppm(const std::filesystem::path& path) {
  try {
    return decode_ppm(slurp(path));
  } catch (const Error& e) {
    throw Error(ErrorCode::kUndecodableImage, path.string() + ": " + e.what());
  }
}

std::string encode_ppm(const RgbImage& image) {
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  return out;
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << encode_ppm(image);
}

LabelImage read_pgm(const std::filesystem::path& path) {
  const std::string bytes = slurp(path);
  HeaderReader h{bytes};
  const std::string magic = h.field();
  if (magic != "P5" && magic != "P2") throw Error(ErrorCode::kUndecodableImage, path.string() + ": not a PGM image");
  const int w = h.number(), ht = h.number(), maxval = h.number();
  if (w <= 0 || ht <= 0 || maxval <= 0 || maxval > 65535)
    throw Error(ErrorCode::kUndecodableImage, path.string() + ": unsupported PGM header");
  LabelImage labels(ht, w);
  if (magic == "P2") {
    for (Eigen::Index i = 0; i < labels.size(); ++i) labels.data()[i] = h.number();
    return labels;
  }
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  const std::size_t start = h.pos + 1;
  if (bytes.size() < start + static_cast<std::size_t>(labels.size()) * bpp)
    throw Error(ErrorCode::kUndecodableImage, path.string() + ": truncated PGM data");
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start + static_cast<std::size_t>(i) * bpp);
    labels.data()[i] = bpp == 2 ? (p[0] << 8 | p[1]) : p[0];
  }
  return labels;
}

void write_pgm(const std::filesystem::path& path, const LabelImage& labels) {
  const int maxval = std::max(1, labels.size() ? labels.maxCoeff() : 1);
  if (labels.size() && labels.minCoeff() < 0) throw Error(ErrorCode::kInvalidArgument, "negative label");
  if (maxval > 65535) throw Error(ErrorCode::kInvalidArgument, "label exceeds 16 bits");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  const bool wide = maxval > 255;
  out << "P5\n" << labels.cols() << " " << labels.rows() << "\n" << (wide ? 65535 : 255) << "\n";
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const int v = labels.data()[i];
    if (wide) out.put(static_cast<char>(v >> 8));
    out.put(static_cast<char>(v & 0xff));
  }
}

}  // namespace medprompt
