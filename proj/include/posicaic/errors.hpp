#pragma once

#include <stdexcept>
#include <string>

namespace posicaic {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Singular or ill-conditioned matrix. cluster is -1 when not tied to a cluster.
struct NumericalError : Error {
  NumericalError(const std::string& msg, int cluster_index = -1)
      : Error(cluster_index >= 0 ? msg + " (cluster " + std::to_string(cluster_index) + ")" : msg),
        cluster(cluster_index) {}
  int cluster;
};

struct ConvergenceError : Error {
  using Error::Error;
};

struct SamplerError : Error {
  using Error::Error;
};

struct DataError : Error {
  DataError(const std::string& msg, long line_no = -1)
      : Error(line_no >= 0 ? "line " + std::to_string(line_no) + ": " + msg : msg), line(line_no) {}
  long line;
};

struct TargetNeverSelected : Error {
  using Error::Error;
};

}  // namespace posicaic
