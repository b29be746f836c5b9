/*
 *  Copyright 2026 The vesselseg Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <functional>
#include <string>

namespace vesselseg {

using WarningHandler = std::function<void(const std::string&)>;

/// Replaces the process-wide warning sink; an empty handler restores the
/// default, which writes to stderr. Returns the previous handler.
WarningHandler set_warning_handler(WarningHandler h);

void warn(const std::string& message);

}  // namespace vesselseg
