#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace klreg {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Fast identity and oracle checks of the numerical core (a few seconds).
std::vector<CheckResult> self_check();

void print_checks(const std::vector<CheckResult>& checks, std::ostream& out);

}  // namespace klreg
