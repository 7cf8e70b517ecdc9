#include "uqcal/diagnostics.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace uqcal {
namespace {

std::mutex g_mutex;
WarningCapture* g_capture = nullptr;
std::atomic<std::size_t> g_count{0};

}  // namespace

void warn(const std::string& message) {
  g_count.fetch_add(1, std::memory_order_relaxed);
  std::lock_guard lock(g_mutex);
  if (g_capture != nullptr) {
    g_capture->messages_.push_back(message);
    return;
  }
  std::cerr << "warning: " << message << '\n';
}

std::size_t warning_count() { return g_count.load(std::memory_order_relaxed); }

WarningCapture::WarningCapture() {
  std::lock_guard lock(g_mutex);
  previous_ = g_capture;
  g_capture = this;
}

WarningCapture::~WarningCapture() {
  std::lock_guard lock(g_mutex);
  g_capture = previous_;
}

bool WarningCapture::contains(const std::string& needle) const {
  for (const auto& m : messages_) {
    if (m.find(needle) != std::string::npos) return true;
  }
  return false;
}

}  // namespace uqcal
