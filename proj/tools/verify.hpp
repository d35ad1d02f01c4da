#pragma once

// Self-contained oracle checks behind `geico verify`. Every check builds its
// own fixtures, so the suite runs on a fresh checkout.

#include <string>
#include <vector>

#include "geico/geo.hpp"
#include "json.hpp"

namespace geico::verify {

struct Check {
  std::string suite;
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  std::string relation;  // how value is compared with threshold: "<", "<=", ">=", "=="
  bool pass = false;
};

struct Options {
  std::uint64_t seed = 0;
  // Distance used by every W2-based check; replaced to test that the suite notices a broken closed form.
  geo::W2Fn w2 = geo::w2_gaussian;
};

const std::vector<std::string>& suites();  // flows, distances, gw, bounds

// `suite` is one of suites() or "all"; throws std::invalid_argument otherwise.
std::vector<Check> run(const std::string& suite, const Options& opt);

nlohmann::json report(const std::string& suite, const std::vector<Check>& checks);

// W2 with the sign of the covariance (trace) term flipped.
Tensor w2_trace_sign_flip(const geo::LatentGaussian& a, const geo::LatentGaussian& b);

}  // namespace geico::verify
