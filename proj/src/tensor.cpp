#include "mmfusion/tensor.hpp"

#include <sstream>

namespace mmf {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void check_shape(const Shape& shape, const char* what) {
  for (auto e : shape)
    if (e < 1) throw ConfigError(std::string(what) + ": non-positive extent in shape " + shape_str(shape));
}

namespace detail {
int64_t next_node_id() {
  static std::atomic<int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

}  // namespace mmf
