#pragma once
// Plot-ready CSV output. Every file starts with a "# config_hash=..." comment
// line followed by a header row.

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "snl/error.hpp"

namespace snl {

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& config_hash, const std::vector<std::string>& header)
      : os_(path) {
    if (!os_) throw Error("cannot open " + path + " for writing");
    os_ << "# config_hash=" << config_hash << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << "\n";
  }

  template <class... Ts>
  void row(const Ts&... values) {
    bool first = true;
    ((os_ << (first ? "" : ",") << cell(values), first = false), ...);
    os_ << "\n";
    if (!os_) throw Error("csv write failed");
  }

  void row_values(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) os_ << (i ? "," : "") << cell(values[i]);
    os_ << "\n";
    if (!os_) throw Error("csv write failed");
  }

 private:
  template <class T>
  static std::string cell(const T& v) {
    std::ostringstream s;
    if constexpr (std::is_same_v<T, bool>) {
      s << (v ? 1 : 0);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (std::isnan(v))
        s << "nan";
      else
        s.precision(10), s << v;
    } else {
      s << v;
    }
    return s.str();
  }

  std::ofstream os_;
};

}  // namespace snl
