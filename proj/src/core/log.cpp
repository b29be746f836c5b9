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

#include "vesselseg/log.hpp"

#include <iostream>
#include <mutex>

namespace vesselseg {

namespace {

std::mutex g_mutex;
WarningHandler g_handler;

}  // namespace

WarningHandler set_warning_handler(WarningHandler h) {
  std::lock_guard lock(g_mutex);
  std::swap(g_handler, h);
  return h;
}

void warn(const std::string& message) {
  std::lock_guard lock(g_mutex);
  if (g_handler)
    g_handler(message);
  else
    std::cerr << "warning: " << message << '\n';
}

}  // namespace vesselseg
