#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace madt {

// Flat key = value text with [section] headers, one section per subcommand.
// Unknown keys are rejected at validation time; the resolved view is echoed
// into every run directory for provenance.
class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  double get_real(const std::string& section, const std::string& key, double fallback) const;
  int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
  bool get_flag(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                    const std::vector<std::string>& fallback) const;

  void set(const std::string& section, const std::string& key, const std::string& value);

  // Throws ConfigError naming the first unknown key in `section`.
  void validate_section(const std::string& section,
                        const std::set<std::string>& allowed) const;

  std::string dump() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace madt
