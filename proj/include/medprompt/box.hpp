#pragma once

#include <string>

namespace medprompt {

// Corner-form box in pixels; right and bottom edges are exclusive.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  static Box from_xywh(double x, double y, double w, double h) { return {x, y, x + w, y + h}; }

  friend bool operator==(const Box&, const Box&) = default;
};

// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b);

struct LabeledBox {
  Box box;
  std::string category;

  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct Detection {
  Box box;
  std::string category;
  double score = 0;  // in [0, 1]

  friend bool operator==(const Detection&, const Detection&) = default;
};

}  // namespace medprompt
