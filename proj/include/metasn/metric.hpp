#pragma once

// Distance metric shared by the task sampler (initial embedding space) and
// the encoder (learned embedding space). The differentiable tape version
// lives in encoder.hpp; this header covers plain value vectors.

#include <span>
#include <string>

namespace metasn {

enum class Metric { euclidean, squared_euclidean, cosine };

const char* to_string(Metric m);
Metric metric_from_string(const std::string& s);

// Throws ShapeError on dimension mismatch and std::domain_error for cosine
// with a zero vector.
double distance(std::span<const double> u, std::span<const double> v, Metric m);

}  // namespace metasn
