#pragma once

#include <string>
#include <vector>

namespace tandepth {

struct CriterionResult {
    int id = 0;
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

// Runs the geometry/resampling/gradient/attention/loss/metric invariant
// suite (checks 1-8). data_dir must contain smooth_512x1024.png.
std::vector<CriterionResult> run_selftest(const std::string& data_dir);

bool all_passed(const std::vector<CriterionResult>& results);

}  // namespace tandepth
