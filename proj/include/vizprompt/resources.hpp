#pragma once

#include <string_view>
#include <vector>

namespace vizprompt {

// Files compiled into the library: data/catalog.json and templates/*.txt,
// keyed by their path relative to the project root. Throws Error(BadConfig)
// for an unknown name.
std::string_view resource(std::string_view name);
std::vector<std::string_view> resource_names();

}  // namespace vizprompt
