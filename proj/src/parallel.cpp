#include "kcal/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace kcal {

std::size_t worker_count() {
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  if (const char* cap = std::getenv("KCAL_THREADS")) {
    try {
      const long requested = std::stol(cap);
      if (requested >= 1) workers = std::min(workers, static_cast<std::size_t>(requested));
    } catch (const std::exception&) {
      // ignore malformed values
    }
  }
  return workers;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  const std::size_t workers = std::min(worker_count(), n / 64 + 1);
  if (workers <= 1) {
    if (n > 0) body(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&, w, begin, end] {
      try {
        body(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace kcal
