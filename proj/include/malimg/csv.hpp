#pragma once

#include <string>
#include <vector>

namespace malimg {

/// Splits one CSV record; double quotes group fields and "" escapes a quote.
std::vector<std::string> split_csv_line(const std::string& line);

/// Quotes a field when it contains a separator, quote or newline.
std::string csv_field(const std::string& value);

}  // namespace malimg
