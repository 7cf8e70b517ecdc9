#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace uqcal {

// Non-fatal conditions (empty metric input, degenerate quantile range,
// identity fallback for a class) are reported here instead of thrown.
void warn(const std::string& message);

std::size_t warning_count();

// Silences stderr output of warnings while alive, and records them. Nested
// captures stack; only the innermost one receives messages.
class WarningCapture {
 public:
  WarningCapture();
  ~WarningCapture();
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(const std::string& needle) const;

 private:
  friend void warn(const std::string& message);
  std::vector<std::string> messages_;
  WarningCapture* previous_ = nullptr;
};

}  // namespace uqcal
