#include "kcal/common.hpp"

#include <atomic>
#include <iostream>

namespace kcal {

namespace {
std::atomic<std::size_t> g_warnings{0};
}

void warn(const std::string& message) {
  ++g_warnings;
  std::cerr << "warning: " << message << '\n';
}

std::size_t warning_count() { return g_warnings.load(); }

}  // namespace kcal
