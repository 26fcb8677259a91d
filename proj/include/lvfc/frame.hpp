#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lvfc/calendar.hpp"
#include "lvfc/common.hpp"

namespace lvfc {

//! Column store of model covariates. Each row is one (date, period) target
//! timestep; daily frames use period 0. Rows whose lags are missing are kept
//! but flagged unavailable and hold NaN in the affected columns.
class FeatureFrame {
 public:
  std::string node_id;
  std::vector<Date> dates;
  std::vector<int> periods;
  std::vector<std::uint8_t> available;

  std::size_t rows() const { return dates.size(); }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::span<const double> column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw DataError("feature frame '" + node_id + "' has no column '" + name + "'");
    return columns_[it->second];
  }

  //! Adds (or replaces) a column sized to the current row count.
  std::vector<double>& add_column(const std::string& name, double fill = 0.0) {
    auto it = index_.find(name);
    if (it != index_.end()) {
      columns_[it->second].assign(rows(), fill);
      return columns_[it->second];
    }
    index_[name] = columns_.size();
    names_.push_back(name);
    columns_.emplace_back(rows(), fill);
    return columns_.back();
  }

  std::vector<double>& mutable_column(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw DataError("feature frame '" + node_id + "' has no column '" + name + "'");
    return columns_[it->second];
  }

  const std::vector<std::string>& column_names() const { return names_; }

  std::vector<std::size_t> available_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows(); ++i)
      if (available[i]) out.push_back(i);
    return out;
  }

  //! Row positions whose date satisfies the predicate and that are available.
  template <typename Pred>
  std::vector<std::size_t> rows_where(Pred&& pred) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < rows(); ++i)
      if (available[i] && pred(dates[i])) out.push_back(i);
    return out;
  }

  //! Row for (date, period) or npos.
  std::size_t find(Date d, int period) const {
    auto lo = std::lower_bound(dates.begin(), dates.end(), d);
    for (auto it = lo; it != dates.end() && *it == d; ++it) {
      const auto i = static_cast<std::size_t>(it - dates.begin());
      if (periods[i] == period) return i;
    }
    return npos;
  }

  FeatureFrame subset(std::span<const std::size_t> rows_to_keep) const {
    FeatureFrame out;
    out.node_id = node_id;
    for (auto i : rows_to_keep) {
      out.dates.push_back(dates[i]);
      out.periods.push_back(periods[i]);
      out.available.push_back(available[i]);
    }
    for (std::size_t c = 0; c < names_.size(); ++c) {
      auto& col = out.add_column(names_[c]);
      for (std::size_t k = 0; k < rows_to_keep.size(); ++k) col[k] = columns_[c][rows_to_keep[k]];
    }
    return out;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
  std::deque<std::vector<double>> columns_;  // stable references across add_column
};

}  // namespace lvfc
