#pragma once

#include <map>
#include <string>

#include "rcn/params.hpp"

namespace rcn {

// Checkpoint container: the parameter store plus a free-form string-keyed
// config echo (serialized into the header as a JSON object).
struct Checkpoint {
    ParamStore params;
    std::map<std::string, std::string> config;
};

// File layout: magic "RCN1", u32 little-endian header length, UTF-8 JSON
// header {format_version, params:[{name,shape,frozen}...], config:{...}},
// then raw little-endian IEEE-754 doubles in header order. Round trips are
// bit-exact.
void save_checkpoint_file(const std::string& path, const ParamStore& params,
                          const std::map<std::string, std::string>& config);

Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace rcn
