// SPDX-License-Identifier: Apache-2.0
#include "genq/harness/report.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "genq/common/binary_io.hpp"
#include "genq/common/error.hpp"

namespace genq::harness {
namespace {

void check_field(const std::string& field, const char* what) {
  if (field.find_first_of(",\n\r") != std::string::npos) {
    throw ContractError(std::string("report ") + what + " may not contain commas or newlines: '" + field + "'");
  }
}

// One write(2) on an O_APPEND descriptor keeps concurrent runs from interleaving rows.
void append_block(const std::string& path, const std::string& header, const std::string& block) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw Error("cannot open " + path + ": " + std::strerror(errno));
  std::string data = block;
  if (::lseek(fd, 0, SEEK_END) == 0) data = header + "\n" + block;
  const char* p = data.data();
  std::size_t left = data.size();
  while (left > 0) {
    const ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      throw Error("cannot write " + path + ": " + std::strerror(err));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  ::close(fd);
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void Report::add(std::uint64_t seed, std::string stage, std::string metric, double value, double seconds) {
  check_field(stage, "stage");
  check_field(metric, "metric");
  if (!std::isfinite(value)) throw NumericError("report value for " + stage + "/" + metric + " is not finite");
  rows_.push_back(ReportRow{experiment_, seed, std::move(stage), std::move(metric), value, seconds});
}

std::vector<ReportRow> Report::rows_for(std::string_view stage) const {
  std::vector<ReportRow> out;
  for (const auto& r : rows_) {
    if (r.stage == stage) out.push_back(r);
  }
  return out;
}

std::string Report::csv() const {
  std::string out;
  for (const auto& r : rows_) {
    out += r.experiment + "," + std::to_string(r.seed) + "," + r.stage + "," + r.metric + "," + format_value(r.value) + "\n";
  }
  return out;
}

std::string Report::timing_csv() const {
  std::string out;
  for (const auto& r : rows_) {
    if (r.seconds <= 0.0) continue;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", r.seconds);
    out += r.experiment + "," + std::to_string(r.seed) + "," + r.stage + "," + buf + "\n";
  }
  return out;
}

void Report::append_to(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  append_block(dir + "/report.csv", kReportHeader, csv());
  const std::string timing = timing_csv();
  if (!timing.empty()) append_block(dir + "/timing.csv", kTimingHeader, timing);
}

std::vector<ReportRow> read_report(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) {
    throw FormatError(path + ": missing or wrong header");
  }
  std::vector<ReportRow> rows;
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    const std::string where = path + ":" + std::to_string(number);
    const auto f = split(line);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    ReportRow r;
    r.experiment = f[0];
    std::size_t used = 0;
    try {
      r.seed = std::stoull(f[1], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (f[1].empty() || used != f[1].size() || f[1][0] == '-') throw FormatError(where + ": bad seed '" + f[1] + "'");
    r.stage = f[2];
    r.metric = f[3];
    if (r.experiment.empty() || r.stage.empty() || r.metric.empty()) throw FormatError(where + ": empty field");
    try {
      r.value = std::stod(f[4], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (f[4].empty() || used != f[4].size() || !std::isfinite(r.value)) {
      throw FormatError(where + ": bad value '" + f[4] + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace genq::harness
