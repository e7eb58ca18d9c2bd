// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace capfuse {

std::string_view trim(std::string_view s);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Lowercase hex SHA-256 of the exact bytes.
std::string sha256_hex(std::string_view bytes);

/// Writes `contents` to `path` via a sibling temp file and rename(2), so a
/// reader never observes a partial file.
void write_file_atomic(const std::string& path, std::string_view contents);

std::string read_file(const std::string& path);

}  // namespace capfuse
