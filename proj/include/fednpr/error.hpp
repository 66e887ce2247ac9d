#pragma once

#include <stdexcept>
#include <string>

namespace fednpr {

enum class ErrorKind {
  shape,
  numeric,
  convergence,
  degenerate_feature,
  empty_cluster,
  missing_prototype,
  label,
  empty_prior,
  config,
  partition,
  split,
  metric,
  aggregation,
  io,
};

inline const char* to_string(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::shape: return "shape";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::degenerate_feature: return "degenerate-feature";
    case ErrorKind::empty_cluster: return "empty-cluster";
    case ErrorKind::missing_prototype: return "missing-prototype";
    case ErrorKind::label: return "label";
    case ErrorKind::empty_prior: return "empty-prior";
    case ErrorKind::config: return "config";
    case ErrorKind::partition: return "partition";
    case ErrorKind::split: return "split";
    case ErrorKind::metric: return "metric";
    case ErrorKind::aggregation: return "aggregation";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

}  // namespace fednpr
